#include "kgqa/abstract_graph.hpp"

#include <algorithm>
#include <climits>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>

#include <nlohmann/json.hpp>

namespace kgqa {

AbstractSubgraph::AbstractSubgraph(std::vector<AbstractNode> nodes,
                                   std::vector<AbstractTriple> triples,
                                   std::vector<AbstractId> topic_nodes)
    : nodes_(std::move(nodes)), triples_(std::move(triples)), topic_nodes_(std::move(topic_nodes)) {
  for (const auto& n : nodes_) {
    for (const EntityId e : n.members) membership_.emplace_back(e, n.id);
  }
  std::sort(membership_.begin(), membership_.end());
}

const AbstractNode& AbstractSubgraph::node(AbstractId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("unknown abstract node " + std::to_string(id));
  return nodes_[id];
}

std::optional<AbstractId> AbstractSubgraph::node_of(EntityId e) const {
  auto it = std::lower_bound(membership_.begin(), membership_.end(), std::make_pair(e, AbstractId{0}));
  if (it == membership_.end() || it->first != e) return std::nullopt;
  return it->second;
}

namespace {

constexpr std::uint32_t kUnassigned = UINT32_MAX;

// Local indices into Subgraph::entities.
std::uint32_t local(const Subgraph& sub, EntityId e) {
  auto it = std::lower_bound(sub.entities.begin(), sub.entities.end(), e);
  if (it == sub.entities.end() || *it != e) {
    throw std::invalid_argument("entity " + std::to_string(index(e)) + " not in subgraph");
  }
  return static_cast<std::uint32_t>(it - sub.entities.begin());
}

}  // namespace

AbstractSubgraph abstract_subgraph(const Subgraph& sub, std::span<const EntityId> topics) {
  if (sub.entities.empty()) throw std::invalid_argument("cannot abstract an empty subgraph");
  const std::size_t n = sub.entities.size();

  struct LocalTriple {
    std::uint32_t head;
    RelationId relation;
    std::uint32_t tail;
  };
  std::vector<LocalTriple> local_triples;
  local_triples.reserve(sub.triples.size());
  std::vector<std::vector<std::uint32_t>> adjacency(n);
  for (const auto& t : sub.triples) {
    const auto h = local(sub, t.head);
    const auto e = local(sub, t.tail);
    local_triples.push_back({h, t.relation, e});
    adjacency[h].push_back(e);
    adjacency[e].push_back(h);
  }

  std::vector<bool> is_topic(n, false);
  std::vector<int> dist(n, INT_MAX);
  std::deque<std::uint32_t> frontier;
  for (const EntityId t : topics) {
    const auto i = local(sub, t);
    if (!is_topic[i]) {
      is_topic[i] = true;
      dist[i] = 0;
      frontier.push_back(i);
    }
  }
  while (!frontier.empty()) {
    const auto u = frontier.front();
    frontier.pop_front();
    for (const auto v : adjacency[u]) {
      if (dist[v] == INT_MAX) {
        dist[v] = dist[u] + 1;
        frontier.push_back(v);
      }
    }
  }

  std::vector<std::uint32_t> node_of(n, kUnassigned);
  std::vector<std::vector<std::uint32_t>> members;  // local indices per node
  std::vector<AbstractId> topic_nodes;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (is_topic[i]) {
      node_of[i] = static_cast<std::uint32_t>(members.size());
      topic_nodes.push_back(node_of[i]);
      members.push_back({i});
    }
  }

  auto merge = [&](std::vector<std::uint32_t>& group) {
    std::sort(group.begin(), group.end());
    group.erase(std::unique(group.begin(), group.end()), group.end());
    std::erase_if(group, [&](std::uint32_t i) { return node_of[i] != kUnassigned; });
    if (group.size() < 2) return;
    const auto id = static_cast<std::uint32_t>(members.size());
    for (const auto i : group) node_of[i] = id;
    members.push_back(std::move(group));
  };

  // Pass 1: tails sharing a (head, relation) prefix.
  {
    std::map<std::tuple<int, std::uint32_t, RelationId>, std::vector<std::uint32_t>> groups;
    for (const auto& t : local_triples) groups[{dist[t.head], t.head, t.relation}].push_back(t.tail);
    for (auto& [key, tails] : groups) merge(tails);
  }

  // Pass 2: heads sharing (relation, abstract tail). Unplaced tails count as
  // their own singleton, keyed past the merged node ids.
  {
    std::map<std::tuple<int, std::uint32_t, RelationId>, std::vector<std::uint32_t>> groups;
    for (const auto& t : local_triples) {
      const std::uint32_t tail_key =
          node_of[t.tail] != kUnassigned ? node_of[t.tail] : static_cast<std::uint32_t>(n) + t.tail;
      groups[{dist[t.tail], tail_key, t.relation}].push_back(t.head);
    }
    for (auto& [key, heads] : groups) merge(heads);
  }

  for (std::uint32_t i = 0; i < n; ++i) {
    if (node_of[i] == kUnassigned) {
      node_of[i] = static_cast<std::uint32_t>(members.size());
      members.push_back({i});
    }
  }

  std::vector<AbstractNode> nodes(members.size());
  for (std::size_t id = 0; id < members.size(); ++id) {
    nodes[id].id = static_cast<AbstractId>(id);
    for (const auto i : members[id]) nodes[id].members.push_back(sub.entities[i]);
  }
  std::vector<AbstractTriple> triples;
  triples.reserve(local_triples.size());
  for (const auto& t : local_triples) triples.push_back({node_of[t.head], t.relation, node_of[t.tail]});
  std::sort(triples.begin(), triples.end());
  triples.erase(std::unique(triples.begin(), triples.end()), triples.end());

  return AbstractSubgraph(std::move(nodes), std::move(triples), std::move(topic_nodes));
}

std::vector<EntityId> ground(const AbstractSubgraph& graph, std::span<const AbstractId> ids) {
  std::vector<EntityId> out;
  for (const auto id : ids) {
    const auto& m = graph.node(id).members;
    out.insert(out.end(), m.begin(), m.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

TargetVector ground_truth_vector(const AbstractSubgraph& graph, std::span<const EntityId> answers) {
  TargetVector target;
  target.probabilities.assign(graph.num_nodes(), 0.0);
  std::size_t positives = 0;
  for (const auto& node : graph.nodes()) {
    const bool hit = std::any_of(node.members.begin(), node.members.end(), [&](EntityId e) {
      return std::find(answers.begin(), answers.end(), e) != answers.end();
    });
    if (hit) {
      target.probabilities[node.id] = 1.0;
      ++positives;
    }
  }
  if (positives == 0) {
    target.answer_uncovered = true;
    return target;
  }
  for (double& p : target.probabilities) p /= static_cast<double>(positives);
  return target;
}

nlohmann::json to_json(const AbstractSubgraph& graph, const KnowledgeGraph& kg) {
  nlohmann::json out;
  auto& nodes = out["nodes"] = nlohmann::json::array();
  for (const auto& n : graph.nodes()) {
    nlohmann::json labels = nlohmann::json::array();
    for (const EntityId e : n.members) labels.push_back(kg.entity_label(e));
    nodes.push_back({{"id", n.id}, {"members", std::move(labels)}});
  }
  auto& triples = out["triples"] = nlohmann::json::array();
  for (const auto& t : graph.triples()) {
    triples.push_back(nlohmann::json::array({t.head, kg.relation_label(t.relation), t.tail}));
  }
  out["topic_nodes"] = graph.topic_nodes();
  return out;
}

}  // namespace kgqa
