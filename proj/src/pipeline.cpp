#include "kgqa/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace kgqa {

RetrievalResult retrieve(const QAInstance& question, const KnowledgeGraph& kg, const ModelParams& params,
                         Encoder& encoder, const RetrievalOptions& options) {
  if (options.top_k < 1) throw std::invalid_argument("top_k must be at least 1");
  if (options.max_hops < 1) throw std::invalid_argument("max_hops must be at least 1");
  const auto sub = k_hop_subgraph(kg, question.topic_entities, options.max_hops);
  if (sub.triples.empty()) throw std::runtime_error("question " + question.id + " has an empty neighborhood");

  const auto abs = abstract_subgraph(sub, question.topic_entities);
  const auto graph = make_propagation_graph(abs);
  const Embedding q = encoder.encode(question.question, TextKind::Question);
  const Matrix relations = relation_table(graph, kg, encoder);
  const auto trace = forward(graph, q, relations, params);
  Vector scores = trace.states.back().scores;
  if (options.score_mode == ScoreMode::MaxOverSteps) {
    for (const auto& st : trace.states) scores = scores.cwiseMax(st.scores);
  }

  RetrievalResult result;
  result.id = question.id;
  result.abstract_nodes = abs.num_nodes();
  const auto ranked = rank_nodes(scores, {});
  std::vector<AbstractId> chosen;
  for (std::size_t k = 0; k < std::min(options.top_k, ranked.size()); ++k) {
    chosen.push_back(ranked[k]);
    result.selected.emplace_back(ranked[k], scores[ranked[k]]);
  }
  auto entities = ground(abs, chosen);
  entities.insert(entities.end(), question.topic_entities.begin(), question.topic_entities.end());
  result.subgraph = induced_subgraph(kg, std::move(entities));
  result.covered = std::any_of(question.answers.begin(), question.answers.end(),
                               [&](EntityId a) { return result.subgraph.contains(a); });
  return result;
}

std::vector<RetrievalResult> retrieve_all(std::span<const QAInstance> questions, const KnowledgeGraph& kg,
                                          const ModelParams& params, Encoder& encoder,
                                          const RetrievalOptions& options, unsigned threads) {
  std::vector<RetrievalResult> out(questions.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, questions.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(questions.size());
  auto work = [&] {
    for (std::size_t i = next++; i < questions.size(); i = next++) {
      try {
        out[i] = retrieve(questions[i], kg, params, encoder, options);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<RankedAnswer> answer(const QAInstance& question, const Subgraph& subgraph, const KnowledgeGraph& kg,
                                 const ModelParams& params, Encoder& encoder, std::size_t top_n) {
  if (subgraph.entities.empty()) throw std::invalid_argument("cannot answer over an empty subgraph");
  const auto graph = make_propagation_graph(subgraph, question.topic_entities);
  const Vector scores = reason(question.question, graph, kg, params, encoder);
  const auto ranked = rank_nodes(scores, graph.topics);
  std::vector<RankedAnswer> out;
  for (std::size_t k = 0; k < std::min(top_n, ranked.size()); ++k) {
    out.push_back({subgraph.entities[ranked[k]], scores[ranked[k]]});
  }
  return out;
}

nlohmann::json to_json(const RetrievalResult& result, const KnowledgeGraph& kg) {
  nlohmann::json j;
  j["id"] = result.id;
  auto& entities = j["entities"] = nlohmann::json::array();
  for (const EntityId e : result.subgraph.entities) entities.push_back(kg.entity_label(e));
  auto& selected = j["selected"] = nlohmann::json::array();
  for (const auto& [id, score] : result.selected) selected.push_back({id, score});
  j["abstract_nodes"] = result.abstract_nodes;
  j["coverage"] = result.covered;
  j["subgraph_size"] = result.subgraph.entities.size();
  return j;
}

RetrievalResult retrieval_from_json(const nlohmann::json& j, const KnowledgeGraph& kg) {
  RetrievalResult r;
  r.id = j.at("id").get<std::string>();
  std::vector<EntityId> entities;
  for (const auto& label : j.at("entities")) {
    const auto e = kg.find_entity(label.get<std::string>());
    if (!e) throw std::runtime_error("retrieval result " + r.id + " names unknown entity " + label.dump());
    entities.push_back(*e);
  }
  r.subgraph = induced_subgraph(kg, std::move(entities));
  for (const auto& s : j.at("selected")) r.selected.emplace_back(s.at(0).get<AbstractId>(), s.at(1).get<double>());
  r.abstract_nodes = j.value("abstract_nodes", std::size_t{0});
  r.covered = j.value("coverage", false);
  return r;
}

nlohmann::json answers_to_json(const std::string& id, std::span<const RankedAnswer> ranked, const KnowledgeGraph& kg,
                               bool covered, std::size_t subgraph_size) {
  nlohmann::json j;
  j["id"] = id;
  auto& answers = j["answers"] = nlohmann::json::array();
  for (const auto& a : ranked) answers.push_back({{"entity", kg.entity_label(a.entity)}, {"score", a.score}});
  j["coverage"] = covered;
  j["subgraph_size"] = subgraph_size;
  return j;
}

}  // namespace kgqa
