#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kgqa/abstract_graph.hpp"
#include "kgqa/encoder.hpp"
#include "kgqa/kg.hpp"

namespace kgqa {

using Vector = Eigen::VectorXd;

struct ModelDims {
  std::size_t steps = 3;          // T
  std::size_t feature_dim = 32;   // d
  std::size_t text_dim = 32;      // h

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Projections of one propagation step.
struct StepParams {
  Matrix query_proj;     // h x d
  Matrix relation_proj;  // h x d
  Matrix entity_proj;    // 2d x d, applied to [previous; aggregate]
};

/// Matching and propagation parameters. Step t = 1 is initialization and has
/// no StepParams; steps[k] drives propagation step t = k + 2.
struct ModelParams {
  ModelDims dims;
  std::vector<StepParams> steps;
  Matrix init_proj;  // U, h x d
  Vector score_vec;  // v, d

  static ModelParams zeros(const ModelDims& dims);
  /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per block.
  static ModelParams glorot(const ModelDims& dims, std::uint64_t seed);

  void check_shapes() const;

  /// Every parameter block in checkpoint order: W_Q(2..T), W_R(2..T),
  /// W_E(2..T), U, v.
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;
  std::vector<std::string> block_names() const;
  std::size_t size() const;

  void set_zero();
  ModelParams& operator+=(const ModelParams& other);
  ModelParams& operator*=(double scale);
  /// FNV-1a over the raw bytes of all blocks.
  std::uint64_t checksum() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

struct Edge {
  std::uint32_t source;
  std::uint32_t relation;  // slot in the relation embedding table
  std::uint32_t target;
};

/// Graph in the form consumed by propagation: dense node ids, edges sorted by
/// target, relation slots that index a per-graph embedding table.
struct PropagationGraph {
  std::size_t num_nodes = 0;
  std::vector<Edge> edges;
  std::vector<std::uint32_t> topics;
  std::vector<RelationId> relations;  // slot -> relation id

  void validate() const;
};

PropagationGraph make_propagation_graph(const AbstractSubgraph& graph);
/// Node i corresponds to subgraph.entities[i].
PropagationGraph make_propagation_graph(const Subgraph& subgraph, std::span<const EntityId> topics);

/// Relation embedding table (slots x h) for a propagation graph.
Matrix relation_table(const PropagationGraph& graph, const KnowledgeGraph& kg, Encoder& encoder);

struct MatchState {
  std::size_t step = 1;
  Matrix representations;  // nodes x d
  Vector scores;           // distribution over nodes
  Vector logits;           // empty at step 1
};

/// sigmoid((q W_Q) .* (r W_R)) for propagation step `step` (2..T).
Embedding sm_features(const Embedding& question, const Embedding& relation, std::size_t step,
                      const ModelParams& params);

MatchState init_state(const PropagationGraph& graph, const ModelParams& params,
                      const Matrix& relations);

/// Advances `state` (at step t-1) to step t.
MatchState propagate_step(const MatchState& state, const PropagationGraph& graph,
                          const Embedding& question, const Matrix& relations, std::size_t step,
                          const ModelParams& params);

/// Everything backward() needs, one entry per step.
struct ForwardTrace {
  std::vector<MatchState> states;  // steps 1..T
  std::vector<Matrix> features;    // per propagation step: slots x d
  std::vector<Matrix> aggregates;  // per propagation step: nodes x d
  std::vector<Embedding> query_proj;  // q W_Q per propagation step
  std::vector<Matrix> relation_proj;  // relations W_R per propagation step
};

ForwardTrace forward(const PropagationGraph& graph, const Embedding& question,
                     const Matrix& relations, const ModelParams& params);

/// Final scores s^(T).
Vector reason(const PropagationGraph& graph, const Embedding& question, const Matrix& relations,
              const ModelParams& params);
Vector reason(std::string_view question, const PropagationGraph& graph, const KnowledgeGraph& kg,
              const ModelParams& params, Encoder& encoder);

/// Node ids by descending score, ties by ascending id, `exclude` left out.
std::vector<std::uint32_t> rank_nodes(const Vector& scores, std::span<const std::uint32_t> exclude);

/// Gradient of a loss w.r.t. all parameters given its gradient w.r.t. the
/// final logits (pre-softmax scores of step T). A T = 1 model has no
/// parameters on the path and yields zeros.
ModelParams backward(const ForwardTrace& trace, const PropagationGraph& graph,
                     const Embedding& question, const Matrix& relations,
                     const ModelParams& params, const Vector& final_logit_grad);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::string& encoder_reference, std::uint64_t fingerprint);

struct Checkpoint {
  ModelParams params;
  std::string encoder_reference;
  std::uint64_t fingerprint = 0;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kgqa
