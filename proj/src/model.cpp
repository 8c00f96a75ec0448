#include "kgqa/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "binary_io.hpp"

namespace kgqa {

namespace {

constexpr char kCheckpointMagic[5] = "KGQM";
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix sigmoid(const Matrix& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

Embedding sigmoid(const Embedding& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

Vector softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  Vector e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

void fill_uniform(std::span<double> block, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (double& x : block) x = uniform(rng);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::span<double> as_span(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

// ---- ModelParams -----------------------------------------------------------

ModelParams ModelParams::zeros(const ModelDims& dims) {
  require(dims.steps >= 1, "model needs at least one step");
  require(dims.feature_dim >= 1 && dims.text_dim >= 1, "model dimensions must be positive");
  const auto h = static_cast<Eigen::Index>(dims.text_dim);
  const auto d = static_cast<Eigen::Index>(dims.feature_dim);
  ModelParams p;
  p.dims = dims;
  p.steps.resize(dims.steps - 1);
  for (auto& s : p.steps) {
    s.query_proj = Matrix::Zero(h, d);
    s.relation_proj = Matrix::Zero(h, d);
    s.entity_proj = Matrix::Zero(2 * d, d);
  }
  p.init_proj = Matrix::Zero(h, d);
  p.score_vec = Vector::Zero(d);
  return p;
}

ModelParams ModelParams::glorot(const ModelDims& dims, std::uint64_t seed) {
  ModelParams p = zeros(dims);
  std::mt19937_64 rng(seed);
  const double h = static_cast<double>(dims.text_dim);
  const double d = static_cast<double>(dims.feature_dim);
  for (auto& s : p.steps) fill_uniform(as_span(s.query_proj), std::sqrt(6.0 / (h + d)), rng);
  for (auto& s : p.steps) fill_uniform(as_span(s.relation_proj), std::sqrt(6.0 / (h + d)), rng);
  for (auto& s : p.steps) fill_uniform(as_span(s.entity_proj), std::sqrt(6.0 / (3.0 * d)), rng);
  fill_uniform(as_span(p.init_proj), std::sqrt(6.0 / (h + d)), rng);
  fill_uniform(as_span(p.score_vec), std::sqrt(6.0 / (d + 1.0)), rng);
  return p;
}

void ModelParams::check_shapes() const {
  const auto h = static_cast<Eigen::Index>(dims.text_dim);
  const auto d = static_cast<Eigen::Index>(dims.feature_dim);
  require(dims.steps >= 1 && steps.size() == dims.steps - 1, "step parameter count does not match T");
  for (const auto& s : steps) {
    require(s.query_proj.rows() == h && s.query_proj.cols() == d, "W_Q must be h x d");
    require(s.relation_proj.rows() == h && s.relation_proj.cols() == d, "W_R must be h x d");
    require(s.entity_proj.rows() == 2 * d && s.entity_proj.cols() == d, "W_E must be 2d x d");
  }
  require(init_proj.rows() == h && init_proj.cols() == d, "U must be h x d");
  require(score_vec.size() == d, "v must have d entries");
}

std::vector<std::span<double>> ModelParams::blocks() {
  std::vector<std::span<double>> out;
  for (auto& s : steps) out.push_back(as_span(s.query_proj));
  for (auto& s : steps) out.push_back(as_span(s.relation_proj));
  for (auto& s : steps) out.push_back(as_span(s.entity_proj));
  out.push_back(as_span(init_proj));
  out.push_back(as_span(score_vec));
  return out;
}

std::vector<std::span<const double>> ModelParams::blocks() const {
  auto spans = const_cast<ModelParams*>(this)->blocks();
  return {spans.begin(), spans.end()};
}

std::vector<std::string> ModelParams::block_names() const {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < steps.size(); ++k) names.push_back("W_Q[" + std::to_string(k + 2) + "]");
  for (std::size_t k = 0; k < steps.size(); ++k) names.push_back("W_R[" + std::to_string(k + 2) + "]");
  for (std::size_t k = 0; k < steps.size(); ++k) names.push_back("W_E[" + std::to_string(k + 2) + "]");
  names.emplace_back("U");
  names.emplace_back("v");
  return names;
}

std::size_t ModelParams::size() const {
  std::size_t n = 0;
  for (const auto& b : blocks()) n += b.size();
  return n;
}

void ModelParams::set_zero() {
  for (auto b : blocks()) std::fill(b.begin(), b.end(), 0.0);
}

ModelParams& ModelParams::operator+=(const ModelParams& other) {
  require(dims == other.dims, "parameter shapes differ");
  auto mine = blocks();
  const auto theirs = other.blocks();
  for (std::size_t b = 0; b < mine.size(); ++b) {
    for (std::size_t i = 0; i < mine[b].size(); ++i) mine[b][i] += theirs[b][i];
  }
  return *this;
}

ModelParams& ModelParams::operator*=(double scale) {
  for (auto b : blocks()) {
    for (double& x : b) x *= scale;
  }
  return *this;
}

std::uint64_t ModelParams::checksum() const {
  std::uint64_t hash = 1469598103934665603ull;
  for (const auto& b : blocks()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.data());
    for (std::size_t i = 0; i < b.size_bytes(); ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  }
  return hash;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (!(a.dims == b.dims)) return false;
  const auto x = a.blocks();
  const auto y = b.blocks();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != y[i].size() ||
        std::memcmp(x[i].data(), y[i].data(), x[i].size_bytes()) != 0) {
      return false;
    }
  }
  return true;
}

// ---- graphs ----------------------------------------------------------------

void PropagationGraph::validate() const {
  require(num_nodes > 0, "propagation graph has no nodes");
  for (const auto& e : edges) {
    require(e.source < num_nodes && e.target < num_nodes, "edge endpoint out of range");
    require(e.relation < relations.size(), "edge relation slot out of range");
  }
  for (const auto t : topics) require(t < num_nodes, "topic node out of range");
}

namespace {

template <typename TripleRange, typename NodeOf>
void fill_edges(PropagationGraph& g, const TripleRange& triples, NodeOf node_of) {
  for (const auto& t : triples) g.relations.push_back(t.relation);
  std::sort(g.relations.begin(), g.relations.end());
  g.relations.erase(std::unique(g.relations.begin(), g.relations.end()), g.relations.end());
  for (const auto& t : triples) {
    const auto slot = std::lower_bound(g.relations.begin(), g.relations.end(), t.relation) - g.relations.begin();
    g.edges.push_back({node_of(t.head), static_cast<std::uint32_t>(slot), node_of(t.tail)});
  }
  std::sort(g.edges.begin(), g.edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.target, a.source, a.relation) < std::tie(b.target, b.source, b.relation);
  });
}

}  // namespace

PropagationGraph make_propagation_graph(const AbstractSubgraph& graph) {
  PropagationGraph g;
  g.num_nodes = graph.num_nodes();
  fill_edges(g, graph.triples(), [](AbstractId id) { return static_cast<std::uint32_t>(id); });
  g.topics.assign(graph.topic_nodes().begin(), graph.topic_nodes().end());
  return g;
}

PropagationGraph make_propagation_graph(const Subgraph& subgraph, std::span<const EntityId> topics) {
  auto local = [&](EntityId e) {
    auto it = std::lower_bound(subgraph.entities.begin(), subgraph.entities.end(), e);
    if (it == subgraph.entities.end() || *it != e) {
      throw std::invalid_argument("entity " + std::to_string(index(e)) + " not in subgraph");
    }
    return static_cast<std::uint32_t>(it - subgraph.entities.begin());
  };
  PropagationGraph g;
  g.num_nodes = subgraph.entities.size();
  fill_edges(g, subgraph.triples, local);
  for (const EntityId t : topics) g.topics.push_back(local(t));
  std::sort(g.topics.begin(), g.topics.end());
  g.topics.erase(std::unique(g.topics.begin(), g.topics.end()), g.topics.end());
  return g;
}

Matrix relation_table(const PropagationGraph& graph, const KnowledgeGraph& kg, Encoder& encoder) {
  std::vector<std::string> labels;
  labels.reserve(graph.relations.size());
  for (const auto r : graph.relations) labels.push_back(kg.relation_label(r));
  const auto vectors = encoder.encode_batch(labels, TextKind::Relation);
  Matrix table(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(encoder.dim()));
  for (std::size_t i = 0; i < vectors.size(); ++i) table.row(static_cast<Eigen::Index>(i)) = vectors[i];
  return table;
}

// ---- forward ---------------------------------------------------------------

Embedding sm_features(const Embedding& question, const Embedding& relation, std::size_t step,
                      const ModelParams& params) {
  require(step >= 2 && step <= params.dims.steps, "propagation step out of range");
  const auto& s = params.steps[step - 2];
  require(question.size() == s.query_proj.rows() && relation.size() == s.relation_proj.rows(),
          "text embedding width does not match h");
  const Embedding a = question * s.query_proj;
  const Embedding b = relation * s.relation_proj;
  return sigmoid(Embedding(a.cwiseProduct(b)));
}

MatchState init_state(const PropagationGraph& graph, const ModelParams& params, const Matrix& relations) {
  graph.validate();
  require(!graph.topics.empty(), "initial state needs at least one topic node");
  require(relations.rows() == static_cast<Eigen::Index>(graph.relations.size()) &&
              relations.cols() == params.init_proj.rows(),
          "relation table shape does not match graph and h");
  const auto n = static_cast<Eigen::Index>(graph.num_nodes);
  const Matrix projected = relations * params.init_proj;
  Matrix pre = Matrix::Zero(n, params.init_proj.cols());
  for (const auto& e : graph.edges) pre.row(e.target) += projected.row(e.relation);

  MatchState state;
  state.step = 1;
  state.representations = sigmoid(pre);
  state.scores = Vector::Zero(n);
  for (const auto t : graph.topics) state.scores[t] = 1.0 / static_cast<double>(graph.topics.size());
  return state;
}

namespace {

struct StepOutputs {
  MatchState state;
  Matrix features;
  Matrix aggregate;
  Embedding query_proj;
  Matrix relation_proj;
};

StepOutputs run_step(const MatchState& prev, const PropagationGraph& graph, const Embedding& question,
                     const Matrix& relations, std::size_t step, const ModelParams& params) {
  require(step >= 2 && step <= params.dims.steps, "propagation step out of range");
  require(prev.step + 1 == step, "propagation must advance one step at a time");
  const auto& sp = params.steps[step - 2];
  const auto d = static_cast<Eigen::Index>(params.dims.feature_dim);
  require(question.size() == sp.query_proj.rows(), "question embedding width does not match h");

  StepOutputs out;
  out.query_proj = question * sp.query_proj;
  out.relation_proj = relations * sp.relation_proj;
  out.features = sigmoid(Matrix(out.relation_proj.array().rowwise() * out.query_proj.array()));
  out.aggregate = Matrix::Zero(static_cast<Eigen::Index>(graph.num_nodes), d);
  for (const auto& e : graph.edges) {
    out.aggregate.row(e.target) += prev.scores[e.source] * out.features.row(e.relation);
  }
  out.state.step = step;
  out.state.representations =
      prev.representations * sp.entity_proj.topRows(d) + out.aggregate * sp.entity_proj.bottomRows(d);
  out.state.logits = out.state.representations * params.score_vec;
  out.state.scores = softmax(out.state.logits);
  return out;
}

}  // namespace

MatchState propagate_step(const MatchState& state, const PropagationGraph& graph,
                          const Embedding& question, const Matrix& relations, std::size_t step,
                          const ModelParams& params) {
  return run_step(state, graph, question, relations, step, params).state;
}

ForwardTrace forward(const PropagationGraph& graph, const Embedding& question, const Matrix& relations,
                     const ModelParams& params) {
  params.check_shapes();
  ForwardTrace trace;
  trace.states.push_back(init_state(graph, params, relations));
  for (std::size_t t = 2; t <= params.dims.steps; ++t) {
    auto out = run_step(trace.states.back(), graph, question, relations, t, params);
    trace.states.push_back(std::move(out.state));
    trace.features.push_back(std::move(out.features));
    trace.aggregates.push_back(std::move(out.aggregate));
    trace.query_proj.push_back(std::move(out.query_proj));
    trace.relation_proj.push_back(std::move(out.relation_proj));
  }
  return trace;
}

Vector reason(const PropagationGraph& graph, const Embedding& question, const Matrix& relations,
              const ModelParams& params) {
  params.check_shapes();
  MatchState state = init_state(graph, params, relations);
  for (std::size_t t = 2; t <= params.dims.steps; ++t) {
    state = propagate_step(state, graph, question, relations, t, params);
  }
  return state.scores;
}

Vector reason(std::string_view question, const PropagationGraph& graph, const KnowledgeGraph& kg,
              const ModelParams& params, Encoder& encoder) {
  const Embedding q = encoder.encode(question, TextKind::Question);
  const Matrix relations = relation_table(graph, kg, encoder);
  return reason(graph, q, relations, params);
}

std::vector<std::uint32_t> rank_nodes(const Vector& scores, std::span<const std::uint32_t> exclude) {
  std::vector<std::uint32_t> order;
  for (std::uint32_t i = 0; i < static_cast<std::uint32_t>(scores.size()); ++i) {
    if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
  return order;
}

// ---- backward --------------------------------------------------------------

ModelParams backward(const ForwardTrace& trace, const PropagationGraph& graph, const Embedding& question,
                     const Matrix& relations, const ModelParams& params, const Vector& final_logit_grad) {
  ModelParams grad = ModelParams::zeros(params.dims);
  const std::size_t T = params.dims.steps;
  if (T == 1) return grad;
  const auto d = static_cast<Eigen::Index>(params.dims.feature_dim);

  const auto& last = trace.states.back();
  grad.score_vec += last.representations.transpose() * final_logit_grad;
  Matrix rep_grad = final_logit_grad * params.score_vec.transpose();

  for (std::size_t t = T; t >= 2; --t) {
    const std::size_t k = t - 2;
    const auto& prev = trace.states[t - 2];
    const auto& sp = params.steps[k];
    auto& gs = grad.steps[k];
    const Matrix& features = trace.features[k];

    gs.entity_proj.topRows(d) += prev.representations.transpose() * rep_grad;
    gs.entity_proj.bottomRows(d) += trace.aggregates[k].transpose() * rep_grad;
    Matrix prev_rep_grad = rep_grad * sp.entity_proj.topRows(d).transpose();
    const Matrix agg_grad = rep_grad * sp.entity_proj.bottomRows(d).transpose();

    Matrix feature_grad = Matrix::Zero(features.rows(), d);
    Vector prev_score_grad = Vector::Zero(static_cast<Eigen::Index>(graph.num_nodes));
    for (const auto& e : graph.edges) {
      feature_grad.row(e.relation) += prev.scores[e.source] * agg_grad.row(e.target);
      prev_score_grad[e.source] += features.row(e.relation).dot(agg_grad.row(e.target));
    }
    const Matrix pre_grad = (feature_grad.array() * features.array() * (1.0 - features.array())).matrix();
    const Embedding query_proj_grad = (pre_grad.array() * trace.relation_proj[k].array()).colwise().sum().matrix();
    const Matrix relation_proj_grad = (pre_grad.array().rowwise() * trace.query_proj[k].array()).matrix();
    gs.query_proj += question.transpose() * query_proj_grad;
    gs.relation_proj += relations.transpose() * relation_proj_grad;

    if (t - 1 >= 2) {
      const Vector& s = prev.scores;
      const Vector logit_grad = (s.array() * (prev_score_grad.array() - s.dot(prev_score_grad))).matrix();
      grad.score_vec += prev.representations.transpose() * logit_grad;
      prev_rep_grad += logit_grad * params.score_vec.transpose();
    }
    rep_grad = std::move(prev_rep_grad);
  }

  // rep_grad now holds d(loss)/d(E^(1)), E^(1) = sigmoid(pre).
  const Matrix& e1 = trace.states.front().representations;
  const Matrix pre_grad = (rep_grad.array() * e1.array() * (1.0 - e1.array())).matrix();
  Matrix slot_grad = Matrix::Zero(relations.rows(), d);
  for (const auto& e : graph.edges) slot_grad.row(e.relation) += pre_grad.row(e.target);
  grad.init_proj += relations.transpose() * slot_grad;
  return grad;
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::string& encoder_reference, std::uint64_t fingerprint) {
  params.check_shapes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  binary::put_magic(out, kCheckpointMagic);
  binary::put<std::uint32_t>(out, kCheckpointVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.dims.steps));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.dims.feature_dim));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.dims.text_dim));
  for (const auto& block : params.blocks()) {
    for (const double x : block) binary::put<double>(out, x);
  }
  binary::put_string(out, encoder_reference);
  binary::put<std::uint64_t>(out, fingerprint);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  binary::expect_magic(in, kCheckpointMagic, "model checkpoint");
  if (binary::get<std::uint32_t>(in) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version in " + path.string());
  }
  ModelDims dims;
  dims.steps = binary::get<std::uint32_t>(in);
  dims.feature_dim = binary::get<std::uint32_t>(in);
  dims.text_dim = binary::get<std::uint32_t>(in);
  Checkpoint ckpt{ModelParams::zeros(dims), {}, 0};
  for (auto block : ckpt.params.blocks()) {
    for (double& x : block) x = binary::get<double>(in);
  }
  ckpt.encoder_reference = binary::get_string(in);
  ckpt.fingerprint = binary::get<std::uint64_t>(in);
  return ckpt;
}

}  // namespace kgqa
