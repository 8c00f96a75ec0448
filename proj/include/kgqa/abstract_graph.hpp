#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kgqa/kg.hpp"

namespace kgqa {

using AbstractId = std::uint32_t;

struct AbstractNode {
  AbstractId id = 0;
  std::vector<EntityId> members;  // sorted, nonempty
};

struct AbstractTriple {
  AbstractId head;
  RelationId relation;
  AbstractId tail;

  friend auto operator<=>(const AbstractTriple&, const AbstractTriple&) = default;
};

/// Reduction of a subgraph in which entities reached through the same
/// (head, relation) prefix share one node. Each entity of the source
/// subgraph is a member of exactly one node, so every original triple maps
/// onto exactly one abstract triple.
class AbstractSubgraph {
 public:
  AbstractSubgraph(std::vector<AbstractNode> nodes, std::vector<AbstractTriple> triples,
                   std::vector<AbstractId> topic_nodes);

  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  const std::vector<AbstractNode>& nodes() const noexcept { return nodes_; }
  const AbstractNode& node(AbstractId id) const;
  const std::vector<AbstractTriple>& triples() const noexcept { return triples_; }
  const std::vector<AbstractId>& topic_nodes() const noexcept { return topic_nodes_; }

  std::optional<AbstractId> node_of(EntityId e) const;

 private:
  std::vector<AbstractNode> nodes_;
  std::vector<AbstractTriple> triples_;
  std::vector<AbstractId> topic_nodes_;
  std::vector<std::pair<EntityId, AbstractId>> membership_;  // sorted by entity
};

/// Two-pass prefix merge. Pass 1 merges the tails of each (head, relation)
/// group, pass 2 merges heads sharing (relation, abstract tail). Groups are
/// visited nearest-to-topic first; entities already placed are not moved and
/// topic entities always remain singletons. Throws on an empty subgraph or a
/// topic outside it.
AbstractSubgraph abstract_subgraph(const Subgraph& subgraph, std::span<const EntityId> topics);

/// Union of the member sets of `ids`.
std::vector<EntityId> ground(const AbstractSubgraph& graph, std::span<const AbstractId> ids);

struct TargetVector {
  std::vector<double> probabilities;
  bool answer_uncovered = false;
};

/// Uniform distribution over the abstract nodes holding at least one answer.
TargetVector ground_truth_vector(const AbstractSubgraph& graph, std::span<const EntityId> answers);

nlohmann::json to_json(const AbstractSubgraph& graph, const KnowledgeGraph& kg);

}  // namespace kgqa
