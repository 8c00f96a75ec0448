#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgqa {

enum class EntityId : std::uint32_t {};
enum class RelationId : std::uint32_t {};

constexpr std::uint32_t index(EntityId e) noexcept { return static_cast<std::uint32_t>(e); }
constexpr std::uint32_t index(RelationId r) noexcept { return static_cast<std::uint32_t>(r); }

// Forward relation k has id 2k, its inverse 2k+1.
constexpr RelationId inverse(RelationId r) noexcept { return RelationId{index(r) ^ 1u}; }
constexpr bool is_inverse(RelationId r) noexcept { return (index(r) & 1u) != 0; }

/// Label suffix that marks the inverse of a relation.
inline constexpr std::string_view kInverseSuffix = "^-1";

struct Triple {
  EntityId head;
  RelationId relation;
  EntityId tail;

  friend auto operator<=>(const Triple&, const Triple&) = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  /// 1-based line number, 0 when not tied to a line.
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Immutable triple store. Every triple is stored together with its inverse,
/// so the incoming adjacency of an entity covers both edge directions.
class KnowledgeGraph {
 public:
  struct LabeledTriple {
    std::string head;
    std::string relation;
    std::string tail;
  };

  static KnowledgeGraph from_labeled(std::span<const LabeledTriple> triples);
  static KnowledgeGraph parse_tsv(std::istream& in);
  static KnowledgeGraph load_tsv(const std::filesystem::path& path);

  std::size_t num_entities() const noexcept { return entity_labels_.size(); }
  /// Includes inverse relations, so always even.
  std::size_t num_relations() const noexcept { return 2 * relation_labels_.size(); }
  std::size_t num_triples() const noexcept { return triples_.size(); }

  bool contains(EntityId e) const noexcept { return index(e) < num_entities(); }
  bool contains(RelationId r) const noexcept { return index(r) < num_relations(); }

  const std::string& entity_label(EntityId e) const;
  std::string relation_label(RelationId r) const;
  std::optional<EntityId> find_entity(std::string_view label) const;
  std::optional<RelationId> find_relation(std::string_view label) const;

  /// All stored triples, sorted by (head, relation, tail).
  std::span<const Triple> triples() const noexcept { return triples_; }
  /// Triples whose tail is `e`. Throws std::out_of_range for unknown ids.
  std::span<const Triple> neighborhood(EntityId e) const;
  /// Triples whose head is `e`.
  std::span<const Triple> outgoing(EntityId e) const;

 private:
  KnowledgeGraph() = default;

  std::vector<std::string> entity_labels_;
  std::vector<std::string> relation_labels_;  // forward relations only
  std::unordered_map<std::string, EntityId> entity_ids_;
  std::unordered_map<std::string, std::uint32_t> relation_ids_;

  std::vector<Triple> triples_;   // sorted by head
  std::vector<Triple> incoming_;  // sorted by tail
  std::vector<std::size_t> out_offsets_;
  std::vector<std::size_t> in_offsets_;
};

/// Entities plus every stored triple among them.
struct Subgraph {
  std::vector<EntityId> entities;  // sorted, unique
  std::vector<Triple> triples;     // sorted

  bool contains(EntityId e) const;
};

Subgraph induced_subgraph(const KnowledgeGraph& g, std::vector<EntityId> entities);

/// BFS hop distance from the nearest seed, -1 beyond `max_depth` or unreachable.
std::vector<int> hop_distances(const KnowledgeGraph& g, std::span<const EntityId> seeds,
                               int max_depth);

Subgraph k_hop_subgraph(const KnowledgeGraph& g, std::span<const EntityId> topics, int k);

struct QAInstance {
  std::string id;
  std::string question;
  std::vector<EntityId> topic_entities;  // sorted, unique, nonempty
  std::vector<EntityId> answers;         // sorted, unique
};

/// Reads JSON Lines questions and resolves labels against `g`.
std::vector<QAInstance> load_questions(const std::filesystem::path& path, const KnowledgeGraph& g);
std::vector<QAInstance> parse_questions(std::istream& in, const KnowledgeGraph& g);
void write_questions(std::ostream& out, std::span<const QAInstance> questions,
                     const KnowledgeGraph& g);

struct PathOptions {
  bool allow_inverse = true;
};

struct PathSupervision {
  std::vector<RelationId> relations;  // sorted, unique
  std::size_t unreachable_pairs = 0;
};

/// Relations on any shortest topic->answer path, over all (topic, answer) pairs.
PathSupervision shortest_path_relations(const KnowledgeGraph& g, const QAInstance& instance,
                                        const PathOptions& options = {});

struct PprOptions {
  double damping = 0.85;
  double tolerance = 1e-8;
  int max_iterations = 200;
};

/// Power-iteration personalized PageRank seeded uniformly on `topics`.
std::vector<double> personalized_pagerank(const KnowledgeGraph& g, std::span<const EntityId> topics,
                                          const PprOptions& options = {});

Subgraph ppr_retrieve(const KnowledgeGraph& g, std::span<const EntityId> topics, double damping,
                      std::size_t top_n);

}  // namespace kgqa
