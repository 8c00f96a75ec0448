#include "kgqa/kg.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace kgqa {

namespace {

std::vector<std::size_t> build_offsets(std::span<const Triple> sorted, std::size_t n,
                                       EntityId Triple::*key) {
  std::vector<std::size_t> offsets(n + 1, 0);
  for (const auto& t : sorted) ++offsets[index(t.*key) + 1];
  for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];
  return offsets;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

KnowledgeGraph KnowledgeGraph::from_labeled(std::span<const LabeledTriple> labeled) {
  if (labeled.empty()) throw ParseError("knowledge graph has no triples", 0);

  KnowledgeGraph g;
  auto entity_of = [&g](const std::string& label) {
    auto [it, inserted] = g.entity_ids_.try_emplace(label, EntityId{0});
    if (inserted) {
      it->second = EntityId{static_cast<std::uint32_t>(g.entity_labels_.size())};
      g.entity_labels_.push_back(label);
    }
    return it->second;
  };
  auto relation_of = [&g](const std::string& label) {
    auto [it, inserted] = g.relation_ids_.try_emplace(label, 0u);
    if (inserted) {
      it->second = static_cast<std::uint32_t>(g.relation_labels_.size());
      g.relation_labels_.push_back(label);
    }
    return RelationId{2 * it->second};
  };

  g.triples_.reserve(2 * labeled.size());
  for (const auto& t : labeled) {
    const EntityId h = entity_of(t.head);
    const RelationId r = relation_of(t.relation);
    const EntityId e = entity_of(t.tail);
    g.triples_.push_back({h, r, e});
    g.triples_.push_back({e, inverse(r), h});
  }
  std::sort(g.triples_.begin(), g.triples_.end());
  g.triples_.erase(std::unique(g.triples_.begin(), g.triples_.end()), g.triples_.end());

  g.incoming_ = g.triples_;
  std::stable_sort(g.incoming_.begin(), g.incoming_.end(),
                   [](const Triple& a, const Triple& b) { return index(a.tail) < index(b.tail); });
  g.out_offsets_ = build_offsets(g.triples_, g.num_entities(), &Triple::head);
  g.in_offsets_ = build_offsets(g.incoming_, g.num_entities(), &Triple::tail);
  return g;
}

KnowledgeGraph KnowledgeGraph::parse_tsv(std::istream& in) {
  std::vector<LabeledTriple> labeled;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    LabeledTriple t;
    std::string* fields[] = {&t.head, &t.relation, &t.tail};
    std::size_t start = 0;
    std::size_t count = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      const auto end = tab == std::string::npos ? line.size() : tab;
      if (count < 3) *fields[count] = line.substr(start, end - start);
      ++count;
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (count != 3) {
      throw ParseError("expected 3 tab-separated fields, found " + std::to_string(count), line_no);
    }
    if (t.head.empty() || t.relation.empty() || t.tail.empty()) {
      throw ParseError("empty field", line_no);
    }
    if (ends_with(t.relation, kInverseSuffix)) {
      throw ParseError("relation label '" + t.relation + "' uses the reserved inverse suffix",
                       line_no);
    }
    labeled.push_back(std::move(t));
  }
  if (labeled.empty()) throw ParseError("triples file is empty", 0);
  return from_labeled(labeled);
}

KnowledgeGraph KnowledgeGraph::load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open triples file " + path.string());
  return parse_tsv(in);
}

const std::string& KnowledgeGraph::entity_label(EntityId e) const {
  if (!contains(e)) throw std::out_of_range("unknown entity id " + std::to_string(index(e)));
  return entity_labels_[index(e)];
}

std::string KnowledgeGraph::relation_label(RelationId r) const {
  if (!contains(r)) throw std::out_of_range("unknown relation id " + std::to_string(index(r)));
  const auto& base = relation_labels_[index(r) / 2];
  return is_inverse(r) ? base + std::string(kInverseSuffix) : base;
}

std::optional<EntityId> KnowledgeGraph::find_entity(std::string_view label) const {
  auto it = entity_ids_.find(std::string(label));
  if (it == entity_ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> KnowledgeGraph::find_relation(std::string_view label) const {
  bool inv = false;
  if (ends_with(label, kInverseSuffix)) {
    label.remove_suffix(kInverseSuffix.size());
    inv = true;
  }
  auto it = relation_ids_.find(std::string(label));
  if (it == relation_ids_.end()) return std::nullopt;
  return RelationId{2 * it->second + (inv ? 1u : 0u)};
}

std::span<const Triple> KnowledgeGraph::neighborhood(EntityId e) const {
  if (!contains(e)) throw std::out_of_range("unknown entity id " + std::to_string(index(e)));
  const auto i = index(e);
  return std::span<const Triple>(incoming_).subspan(in_offsets_[i], in_offsets_[i + 1] - in_offsets_[i]);
}

std::span<const Triple> KnowledgeGraph::outgoing(EntityId e) const {
  if (!contains(e)) throw std::out_of_range("unknown entity id " + std::to_string(index(e)));
  const auto i = index(e);
  return std::span<const Triple>(triples_).subspan(out_offsets_[i], out_offsets_[i + 1] - out_offsets_[i]);
}

bool Subgraph::contains(EntityId e) const {
  return std::binary_search(entities.begin(), entities.end(), e);
}

Subgraph induced_subgraph(const KnowledgeGraph& g, std::vector<EntityId> entities) {
  std::sort(entities.begin(), entities.end());
  entities.erase(std::unique(entities.begin(), entities.end()), entities.end());
  Subgraph sub;
  sub.entities = std::move(entities);
  for (const EntityId e : sub.entities) {
    for (const auto& t : g.outgoing(e)) {
      if (sub.contains(t.tail)) sub.triples.push_back(t);
    }
  }
  // outgoing() spans are already sorted and entities ascend, so triples are too.
  return sub;
}

std::vector<int> hop_distances(const KnowledgeGraph& g, std::span<const EntityId> seeds,
                               int max_depth) {
  std::vector<int> dist(g.num_entities(), -1);
  std::deque<EntityId> frontier;
  for (const EntityId s : seeds) {
    if (!g.contains(s)) throw std::out_of_range("unknown entity id " + std::to_string(index(s)));
    if (dist[index(s)] != 0) {
      dist[index(s)] = 0;
      frontier.push_back(s);
    }
  }
  while (!frontier.empty()) {
    const EntityId u = frontier.front();
    frontier.pop_front();
    const int du = dist[index(u)];
    if (du >= max_depth) continue;
    for (const auto& t : g.outgoing(u)) {
      if (dist[index(t.tail)] < 0) {
        dist[index(t.tail)] = du + 1;
        frontier.push_back(t.tail);
      }
    }
  }
  return dist;
}

Subgraph k_hop_subgraph(const KnowledgeGraph& g, std::span<const EntityId> topics, int k) {
  if (k < 1) throw std::invalid_argument("k_hop_subgraph requires k >= 1");
  const auto dist = hop_distances(g, topics, k);
  std::vector<EntityId> members;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] >= 0) members.push_back(EntityId{static_cast<std::uint32_t>(i)});
  }
  return induced_subgraph(g, std::move(members));
}

namespace {

std::vector<EntityId> resolve_labels(const nlohmann::json& arr, const KnowledgeGraph& g,
                                     std::vector<std::string>& missing) {
  std::vector<EntityId> ids;
  for (const auto& item : arr) {
    const auto label = item.get<std::string>();
    if (auto id = g.find_entity(label)) {
      ids.push_back(*id);
    } else {
      missing.push_back(label);
    }
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace

std::vector<QAInstance> parse_questions(std::istream& in, const KnowledgeGraph& g) {
  std::vector<QAInstance> out;
  std::vector<std::string> missing;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    QAInstance q;
    try {
      q.id = obj.at("id").get<std::string>();
      q.question = obj.at("question").get<std::string>();
      q.topic_entities = resolve_labels(obj.at("topic_entities"), g, missing);
      q.answers = resolve_labels(obj.value("answers", nlohmann::json::array()), g, missing);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad question record: ") + e.what(), line_no);
    }
    if (obj.at("topic_entities").empty()) throw ParseError("topic_entities is empty", line_no);
    out.push_back(std::move(q));
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string msg = "unresolved entity labels:";
    for (const auto& m : missing) msg += " " + m;
    throw ParseError(msg, 0);
  }
  return out;
}

std::vector<QAInstance> load_questions(const std::filesystem::path& path, const KnowledgeGraph& g) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open questions file " + path.string());
  return parse_questions(in, g);
}

void write_questions(std::ostream& out, std::span<const QAInstance> questions,
                     const KnowledgeGraph& g) {
  for (const auto& q : questions) {
    nlohmann::json obj;
    obj["id"] = q.id;
    obj["question"] = q.question;
    auto& topics = obj["topic_entities"] = nlohmann::json::array();
    for (const auto e : q.topic_entities) topics.push_back(g.entity_label(e));
    auto& answers = obj["answers"] = nlohmann::json::array();
    for (const auto e : q.answers) answers.push_back(g.entity_label(e));
    out << obj.dump() << '\n';
  }
}

namespace {

// Distances from `source`; when `reverse` is set edges are walked tail->head.
std::vector<int> bfs(const KnowledgeGraph& g, EntityId source, bool reverse, bool allow_inverse) {
  std::vector<int> dist(g.num_entities(), -1);
  std::deque<EntityId> frontier{source};
  dist[index(source)] = 0;
  while (!frontier.empty()) {
    const EntityId u = frontier.front();
    frontier.pop_front();
    const auto edges = reverse ? g.neighborhood(u) : g.outgoing(u);
    for (const auto& t : edges) {
      if (!allow_inverse && is_inverse(t.relation)) continue;
      const EntityId v = reverse ? t.head : t.tail;
      if (dist[index(v)] < 0) {
        dist[index(v)] = dist[index(u)] + 1;
        frontier.push_back(v);
      }
    }
  }
  return dist;
}

}  // namespace

PathSupervision shortest_path_relations(const KnowledgeGraph& g, const QAInstance& instance,
                                        const PathOptions& options) {
  std::set<RelationId> relations;
  PathSupervision result;
  // An edge u->v lies on a shortest s->a path iff d_s(u) + 1 + d_a(v) == d_s(a).
  std::vector<std::vector<int>> to_answer;
  to_answer.reserve(instance.answers.size());
  for (const EntityId a : instance.answers) {
    to_answer.push_back(bfs(g, a, /*reverse=*/true, options.allow_inverse));
  }
  for (const EntityId s : instance.topic_entities) {
    const auto from_topic = bfs(g, s, /*reverse=*/false, options.allow_inverse);
    for (std::size_t ai = 0; ai < instance.answers.size(); ++ai) {
      const EntityId a = instance.answers[ai];
      const int length = from_topic[index(a)];
      if (length < 0) {
        ++result.unreachable_pairs;
        spdlog::debug("question {}: answer {} unreachable from topic {}", instance.id,
                      g.entity_label(a), g.entity_label(s));
        continue;
      }
      const auto& da = to_answer[ai];
      for (const auto& t : g.triples()) {
        if (!options.allow_inverse && is_inverse(t.relation)) continue;
        const int du = from_topic[index(t.head)];
        const int dv = da[index(t.tail)];
        if (du >= 0 && dv >= 0 && du + 1 + dv == length) relations.insert(t.relation);
      }
    }
  }
  result.relations.assign(relations.begin(), relations.end());
  return result;
}

std::vector<double> personalized_pagerank(const KnowledgeGraph& g, std::span<const EntityId> topics,
                                          const PprOptions& options) {
  if (!(options.damping > 0.0 && options.damping < 1.0)) {
    throw std::invalid_argument("damping must lie in (0, 1)");
  }
  if (topics.empty()) throw std::invalid_argument("personalized_pagerank needs seed entities");
  const std::size_t n = g.num_entities();
  std::vector<double> seed(n, 0.0);
  for (const EntityId t : topics) {
    if (!g.contains(t)) throw std::out_of_range("unknown entity id " + std::to_string(index(t)));
    seed[index(t)] = 1.0;
  }
  double seed_mass = 0.0;
  for (double x : seed) seed_mass += x;
  for (double& x : seed) x /= seed_mass;

  std::vector<double> score = seed;
  std::vector<double> next(n);
  for (int it = 0; it < options.max_iterations; ++it) {
    double dangling = 0.0;
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t u = 0; u < n; ++u) {
      const auto out = g.outgoing(EntityId{static_cast<std::uint32_t>(u)});
      if (out.empty()) {
        dangling += score[u];
        continue;
      }
      const double share = options.damping * score[u] / static_cast<double>(out.size());
      for (const auto& t : out) next[index(t.tail)] += share;
    }
    const double restart = 1.0 - options.damping + options.damping * dangling;
    double delta = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      next[u] += restart * seed[u];
      delta += std::abs(next[u] - score[u]);
    }
    score.swap(next);
    if (delta < options.tolerance) break;
  }
  return score;
}

Subgraph ppr_retrieve(const KnowledgeGraph& g, std::span<const EntityId> topics, double damping,
                      std::size_t top_n) {
  if (top_n < topics.size()) throw std::invalid_argument("top_n must be at least |topics|");
  PprOptions options;
  options.damping = damping;
  const auto score = personalized_pagerank(g, topics, options);

  std::vector<EntityId> order(g.num_entities());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = EntityId{static_cast<std::uint32_t>(i)};
  std::stable_sort(order.begin(), order.end(), [&](EntityId a, EntityId b) {
    return score[index(a)] > score[index(b)];
  });

  std::vector<bool> taken(g.num_entities(), false);
  std::vector<EntityId> selected;
  for (const EntityId t : topics) {
    if (!taken[index(t)]) {
      taken[index(t)] = true;
      selected.push_back(t);
    }
  }
  for (const EntityId e : order) {
    if (selected.size() >= top_n) break;
    if (!taken[index(e)]) {
      taken[index(e)] = true;
      selected.push_back(e);
    }
  }
  return induced_subgraph(g, std::move(selected));
}

}  // namespace kgqa
