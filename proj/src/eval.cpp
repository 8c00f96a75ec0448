#include "kgqa/eval.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace kgqa {

HitResult hits_at_1(std::span<const RankedAnswer> ranked, std::span<const EntityId> gold) {
  if (ranked.empty() || gold.empty()) return {0, true};
  const bool hit = std::find(gold.begin(), gold.end(), ranked.front().entity) != gold.end();
  return {hit ? 1 : 0, false};
}

double f1_score(std::span<const EntityId> predicted, std::span<const EntityId> gold) {
  std::vector<EntityId> p(predicted.begin(), predicted.end()), g(gold.begin(), gold.end());
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end()), p.end());
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::vector<EntityId> common;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double precision = static_cast<double>(common.size()) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common.size()) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

double coverage_rate(std::span<const AnswerRecord> records) {
  if (records.empty()) return 0.0;
  const auto n = std::count_if(records.begin(), records.end(), [](const AnswerRecord& r) { return r.covered; });
  return static_cast<double>(n) / static_cast<double>(records.size());
}

double coverage_rate(std::span<const RetrievalResult> results) {
  if (results.empty()) return 0.0;
  const auto n = std::count_if(results.begin(), results.end(), [](const RetrievalResult& r) { return r.covered; });
  return static_cast<double>(n) / static_cast<double>(results.size());
}

std::vector<EntityId> predicted_set(std::span<const RankedAnswer> ranked, double threshold) {
  std::vector<EntityId> out;
  for (const auto& a : ranked) {
    if (a.score >= threshold) out.push_back(a.entity);
  }
  return out;
}

double choose_threshold(std::span<const AnswerRecord> answers, std::span<const QAInstance> gold) {
  if (answers.size() != gold.size()) throw std::invalid_argument("one answer record per question is required");
  double best = kThresholdGrid.front(), best_f1 = -1.0;
  for (const double theta : kThresholdGrid) {
    double sum = 0.0;
    for (std::size_t i = 0; i < answers.size(); ++i) {
      sum += f1_score(predicted_set(answers[i].ranked, theta), gold[i].answers);
    }
    if (sum > best_f1) {
      best_f1 = sum;
      best = theta;
    }
  }
  return best;
}

EvalReport evaluate(std::span<const QAInstance> gold, std::span<const AnswerRecord> answers, double threshold) {
  if (answers.size() != gold.size()) throw std::invalid_argument("one answer record per question is required");
  EvalReport report;
  report.threshold = threshold;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto& a = answers[i];
    const auto h = hits_at_1(a.ranked, gold[i].answers);
    QuestionRecord rec{gold[i].id, h.hit, f1_score(predicted_set(a.ranked, threshold), gold[i].answers),
                       a.covered, a.subgraph_size, h.flagged};
    report.hits_at_1 += rec.hit;
    report.f1 += rec.f1;
    report.coverage += rec.covered ? 1.0 : 0.0;
    report.records.push_back(std::move(rec));
  }
  if (!gold.empty()) {
    const double n = static_cast<double>(gold.size());
    report.hits_at_1 /= n;
    report.f1 /= n;
    report.coverage /= n;
  }
  return report;
}

nlohmann::json to_json(const AnswerRecord& record, const KnowledgeGraph& kg) {
  return answers_to_json(record.id, record.ranked, kg, record.covered, record.subgraph_size);
}

AnswerRecord answer_record_from_json(const nlohmann::json& j, const KnowledgeGraph& kg) {
  AnswerRecord r;
  r.id = j.at("id").get<std::string>();
  for (const auto& a : j.at("answers")) {
    const auto label = a.at("entity").get<std::string>();
    const auto e = kg.find_entity(label);
    if (!e) throw std::runtime_error("answer record " + r.id + " names unknown entity " + label);
    r.ranked.push_back({*e, a.at("score").get<double>()});
  }
  r.covered = j.value("coverage", false);
  r.subgraph_size = j.value("subgraph_size", std::size_t{0});
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["hits_at_1"] = hits_at_1;
  j["f1"] = f1;
  j["coverage_rate"] = coverage;
  j["questions"] = records.size();
  j["f1_threshold"] = threshold;
  j["f1_conventions"] = "predicted = answers with score >= f1_threshold; both empty = 1; one empty = 0";
  j["config_fingerprint"] = fingerprint;
  j["seed"] = seed;
  auto& per = j["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    per.push_back({{"id", r.id},
                   {"hit", r.hit},
                   {"f1", r.f1},
                   {"coverage", r.covered},
                   {"subgraph_size", r.subgraph_size},
                   {"flagged", r.flagged}});
  }
  return j;
}

}  // namespace kgqa
