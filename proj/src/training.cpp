#include "kgqa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include <spdlog/spdlog.h>

namespace kgqa {

void TrainConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2");
  if (!(lr > 0.0) || !(encoder_lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("moment decay rates must lie in [0, 1)");
  }
  if (!(target_smoothing >= 0.0 && target_smoothing < 1.0)) {
    throw std::invalid_argument("target smoothing must lie in [0, 1)");
  }
  if (kl_direction == KlDirection::PredictionFirst && target_smoothing == 0.0) {
    throw std::invalid_argument("prediction-first KL needs target smoothing > 0");
  }
}

// ---- AdamW -------------------------------------------------------------------

AdamW::AdamW(double lr, const TrainConfig& config)
    : lr_(lr), beta1_(config.beta1), beta2_(config.beta2), epsilon_(config.epsilon),
      weight_decay_(config.weight_decay) {}

void AdamW::step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("parameter and gradient block counts differ");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size() || params[b].size() != m_[b].size()) {
      throw std::invalid_argument("parameter block shape changed between optimizer steps");
    }
    auto& m = m_[b];
    auto& v = v_[b];
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double g = grads[b][i];
      double& x = params[b][i];
      x *= 1.0 - lr_ * weight_decay_;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      x -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
    }
  }
}

// ---- contrastive loss ---------------------------------------------------------

double cosine(const Embedding& a, const Embedding& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

namespace {

// d cos(a, b) / d a
Embedding cosine_grad(const Embedding& a, const Embedding& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return Embedding::Zero(a.size());
  return b / (na * nb) - (a.dot(b) / (na * nb)) * a / (na * na);
}

bool contains(const std::vector<std::string>& sorted, const std::string& s) {
  return std::binary_search(sorted.begin(), sorted.end(), s);
}

struct EncodedText {
  std::vector<std::size_t> rows;
  Embedding out;
  Embedding grad;
};

}  // namespace

double contrastive_loss(const ToyEncoder& encoder, std::span<const QRPair> batch,
                        std::span<const std::vector<std::string>> negatives, double temperature,
                        Matrix* table_grad) {
  if (batch.empty()) throw std::invalid_argument("contrastive batch is empty");
  if (!negatives.empty() && negatives.size() != batch.size()) {
    throw std::invalid_argument("negatives must be given per pair");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  const auto width = static_cast<Eigen::Index>(encoder.dim());

  std::vector<EncodedText> questions;
  for (const auto& p : batch) {
    auto rows = encoder.token_rows(p.question, TextKind::Question);
    Embedding out = encoder.forward(rows);
    questions.push_back({std::move(rows), std::move(out), Embedding::Zero(width)});
  }
  std::vector<EncodedText> relations;
  std::unordered_map<std::string, std::size_t> relation_index;
  auto relation = [&](const std::string& label) {
    auto [it, fresh] = relation_index.try_emplace(label, relations.size());
    if (fresh) {
      auto rows = encoder.token_rows(label, TextKind::Relation);
      Embedding out = encoder.forward(rows);
      relations.push_back({std::move(rows), std::move(out), Embedding::Zero(width)});
    }
    return it->second;
  };

  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<std::size_t> cands{relation(batch[i].positive)};
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (j != i && !contains(batch[i].relevant, batch[j].positive)) cands.push_back(relation(batch[j].positive));
    }
    for (std::size_t j = 0; j < negatives.size(); ++j) {
      for (const auto& neg : negatives[j]) {
        if (!contains(batch[i].relevant, neg)) cands.push_back(relation(neg));
      }
    }
    std::vector<double> z(cands.size());
    for (std::size_t c = 0; c < cands.size(); ++c) {
      z[c] = cosine(questions[i].out, relations[cands[c]].out) / temperature;
    }
    const double top = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (const double x : z) sum += std::exp(x - top);
    total += top + std::log(sum) - z[0];

    if (!table_grad) continue;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const double dz = (std::exp(z[c] - top) / sum - (c == 0 ? 1.0 : 0.0)) * scale / temperature;
      auto& r = relations[cands[c]];
      questions[i].grad += dz * cosine_grad(questions[i].out, r.out);
      r.grad += dz * cosine_grad(r.out, questions[i].out);
    }
  }
  if (table_grad) {
    for (const auto& q : questions) encoder.backward(q.rows, q.out, q.grad, *table_grad);
    for (const auto& r : relations) encoder.backward(r.rows, r.out, r.grad, *table_grad);
  }
  return total * scale;
}

std::vector<QRExample> qr_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances) {
  std::vector<QRExample> out;
  for (const auto& inst : instances) {
    const auto sup = shortest_path_relations(kg, inst);
    if (sup.relations.empty()) continue;
    QRExample ex{inst.id, inst.question, {}};
    for (const auto r : sup.relations) ex.relevant.push_back(kg.relation_label(r));
    std::sort(ex.relevant.begin(), ex.relevant.end());
    out.push_back(std::move(ex));
  }
  return out;
}

QRPair sample_pair(const QRExample& example, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, example.relevant.size() - 1);
  return {example.id, example.question, example.relevant[pick(rng)], example.relevant};
}

std::vector<std::string> sample_negatives(const QRPair& pair, std::span<const std::string> pool,
                                          std::size_t count, std::mt19937_64& rng) {
  std::vector<const std::string*> allowed;
  for (const auto& r : pool) {
    if (!contains(pair.relevant, r)) allowed.push_back(&r);
  }
  std::vector<std::string> out;
  if (allowed.empty()) return out;
  std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
  for (std::size_t k = 0; k < count; ++k) out.push_back(*allowed[pick(rng)]);
  return out;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::vector<EpochRecord> pretrain_qrm(const KnowledgeGraph& kg, std::span<const QAInstance> instances,
                                      Encoder& encoder, const TrainConfig& config, const Monitor& monitor) {
  config.validate();
  auto* toy = dynamic_cast<ToyEncoder*>(&encoder);
  if (!toy || !toy->trainable()) throw std::invalid_argument("pre-training needs a trainable toy encoder");
  const auto examples = qr_examples(kg, instances);
  if (examples.empty()) throw std::invalid_argument("no instance has a reachable answer to pre-train on");
  spdlog::info("pre-training on {} of {} instances", examples.size(), instances.size());

  std::vector<std::string> pool;
  for (std::uint32_t r = 0; r < kg.num_relations(); ++r) pool.push_back(kg.relation_label(RelationId{r}));

  std::mt19937_64 rng(config.seed);
  AdamW opt(config.encoder_lr, config);
  Matrix& table = toy->table();
  Matrix grad(table.rows(), table.cols());
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochRecord> history;

  for (std::size_t epoch = 1; epoch <= config.pretrain_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
      std::vector<QRPair> batch;
      std::vector<std::vector<std::string>> negatives;
      for (std::size_t k = at; k < std::min(order.size(), at + config.batch_size); ++k) {
        batch.push_back(sample_pair(examples[order[k]], rng));
        negatives.push_back(sample_negatives(batch.back(), pool, config.negatives, rng));
      }
      grad.setZero();
      loss += contrastive_loss(*toy, batch, negatives, config.temperature, &grad);
      ++batches;
      opt.step({std::span<double>(table.data(), static_cast<std::size_t>(table.size()))},
               {std::span<const double>(grad.data(), static_cast<std::size_t>(grad.size()))});
    }
    EpochRecord rec{"pretrain", epoch, loss / static_cast<double>(batches)};
    rec.seconds = seconds_since(start);
    history.push_back(rec);
    if (monitor) monitor(rec);
  }
  toy->freeze();
  return history;
}

// ---- KL fine-tuning ---------------------------------------------------------

namespace {

void check_simplex(const Vector& v, const char* name) {
  if (v.size() == 0) throw std::invalid_argument(std::string(name) + " is empty");
  if ((v.array() < 0.0).any() || !v.allFinite() || std::abs(v.sum() - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string(name) + " is not a probability distribution");
  }
}

}  // namespace

KlResult kl_loss(const Vector& pred, const Vector& target, KlDirection direction) {
  if (pred.size() != target.size()) throw std::invalid_argument("distributions have different sizes");
  check_simplex(pred, "prediction");
  check_simplex(target, "target");
  KlResult out;
  if (direction == KlDirection::TargetFirst) {
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      if (target[i] == 0.0) continue;
      if (pred[i] == 0.0) throw std::domain_error("prediction is zero where the target is positive");
      out.loss += target[i] * (std::log(target[i]) - std::log(pred[i]));
    }
    out.logit_grad = pred - target;
    return out;
  }
  Vector g = Vector::Zero(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (pred[i] == 0.0) continue;
    if (target[i] == 0.0) throw std::domain_error("target is zero where the prediction is positive");
    g[i] = std::log(pred[i]) - std::log(target[i]);
    out.loss += pred[i] * g[i];
  }
  out.logit_grad = (pred.array() * (g.array() - pred.dot(g))).matrix();
  return out;
}

namespace {

Vector indicator_target(std::size_t n, const std::vector<std::uint32_t>& positives) {
  Vector t = Vector::Zero(static_cast<Eigen::Index>(n));
  for (const auto p : positives) t[p] = 1.0 / static_cast<double>(positives.size());
  return t;
}

Vector smoothed(const Vector& target, const TrainConfig& config) {
  if (config.target_smoothing == 0.0) return target;
  return ((1.0 - config.target_smoothing) * target.array() + config.target_smoothing / static_cast<double>(target.size()))
      .matrix();
}

}  // namespace

ExampleSet retrieval_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances, Encoder& encoder,
                              int max_hops, bool keep_uncovered) {
  ExampleSet set;
  for (const auto& inst : instances) {
    const auto sub = k_hop_subgraph(kg, inst.topic_entities, max_hops);
    const auto abs = abstract_subgraph(sub, inst.topic_entities);
    const auto tv = ground_truth_vector(abs, inst.answers);
    KlExample ex;
    ex.id = inst.id;
    for (std::uint32_t i = 0; i < tv.probabilities.size(); ++i) {
      if (tv.probabilities[i] > 0.0) ex.positives.push_back(i);
    }
    if (tv.answer_uncovered) {
      ++set.uncovered;
      if (!keep_uncovered) continue;
    } else {
      ex.target = Eigen::Map<const Vector>(tv.probabilities.data(), static_cast<Eigen::Index>(tv.probabilities.size()));
    }
    ex.graph = make_propagation_graph(abs);
    ex.question = encoder.encode(inst.question, TextKind::Question);
    ex.relations = relation_table(ex.graph, kg, encoder);
    set.examples.push_back(std::move(ex));
  }
  return set;
}

ExampleSet reasoning_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances,
                              std::span<const Subgraph> subgraphs, Encoder& encoder, bool keep_uncovered) {
  if (instances.size() != subgraphs.size()) throw std::invalid_argument("one subgraph per instance is required");
  ExampleSet set;
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const auto& inst = instances[k];
    const auto& sub = subgraphs[k];
    KlExample ex;
    ex.id = inst.id;
    for (const EntityId a : inst.answers) {
      auto it = std::lower_bound(sub.entities.begin(), sub.entities.end(), a);
      if (it != sub.entities.end() && *it == a) {
        ex.positives.push_back(static_cast<std::uint32_t>(it - sub.entities.begin()));
      }
    }
    std::sort(ex.positives.begin(), ex.positives.end());
    ex.positives.erase(std::unique(ex.positives.begin(), ex.positives.end()), ex.positives.end());
    if (ex.positives.empty()) {
      ++set.uncovered;
      if (!keep_uncovered) continue;
    } else {
      ex.target = indicator_target(sub.entities.size(), ex.positives);
    }
    ex.graph = make_propagation_graph(sub, inst.topic_entities);
    ex.question = encoder.encode(inst.question, TextKind::Question);
    ex.relations = relation_table(ex.graph, kg, encoder);
    set.examples.push_back(std::move(ex));
  }
  return set;
}

double example_hits(std::span<const KlExample> examples, const ModelParams& params) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    const Vector s = reason(ex.graph, ex.question, ex.relations, params);
    const auto ranked = rank_nodes(s, ex.graph.topics);
    if (!ranked.empty() && std::binary_search(ex.positives.begin(), ex.positives.end(), ranked.front())) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

double example_gradient(const KlExample& example, const ModelParams& params, const TrainConfig& config,
                        ModelParams& grad) {
  const auto trace = forward(example.graph, example.question, example.relations, params);
  const Vector& s = trace.states.back().scores;
  const auto kl = kl_loss(s, smoothed(example.target, config), config.kl_direction);
  grad += backward(trace, example.graph, example.question, example.relations, params, kl.logit_grad);
  return kl.loss;
}

FitResult fit_kl(const std::string& phase, std::span<const KlExample> train, std::span<const KlExample> valid,
                 ModelParams init, const TrainConfig& config, std::size_t epochs, const Monitor& monitor) {
  config.validate();
  init.check_shapes();
  std::vector<const KlExample*> usable;
  for (const auto& ex : train) {
    if (ex.target.size() > 0) usable.push_back(&ex);
  }
  if (usable.empty()) throw std::invalid_argument(phase + ": no trainable instances");

  FitResult result{init, {}, 0};
  ModelParams params = std::move(init);
  ModelParams grad = ModelParams::zeros(params.dims);
  AdamW opt(config.lr, config);
  std::mt19937_64 rng(config.seed);
  double best_hits = -1.0;

  auto finish_epoch = [&](std::size_t epoch, double loss, std::chrono::steady_clock::time_point start) {
    EpochRecord rec{phase, epoch, loss};
    if (!valid.empty()) {
      rec.valid_hits = example_hits(valid, params);
      if (rec.valid_hits >= best_hits) {
        best_hits = rec.valid_hits;
        result.params = params;
        result.best_epoch = epoch;
      }
    }
    rec.seconds = seconds_since(start);
    result.history.push_back(rec);
    if (monitor) monitor(rec);
  };

  {
    const auto start = std::chrono::steady_clock::now();
    double loss = 0.0;
    for (const auto* ex : usable) {
      const Vector s = reason(ex->graph, ex->question, ex->relations, params);
      loss += kl_loss(s, smoothed(ex->target, config), config.kl_direction).loss;
    }
    finish_epoch(0, loss / static_cast<double>(usable.size()), start);
  }

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(usable.begin(), usable.end(), rng);
    double loss = 0.0;
    for (std::size_t at = 0; at < usable.size(); at += config.batch_size) {
      const std::size_t end = std::min(usable.size(), at + config.batch_size);
      grad.set_zero();
      for (std::size_t k = at; k < end; ++k) loss += example_gradient(*usable[k], params, config, grad);
      grad *= 1.0 / static_cast<double>(end - at);
      opt.step(params.blocks(), std::as_const(grad).blocks());
    }
    finish_epoch(epoch, loss / static_cast<double>(usable.size()), start);
  }
  if (valid.empty()) {
    result.params = std::move(params);
    result.best_epoch = epochs;
  }
  return result;
}

FitResult finetune_retrieval(const KnowledgeGraph& kg, std::span<const QAInstance> train,
                             std::span<const QAInstance> valid, ModelParams init, Encoder& encoder,
                             const TrainConfig& config, int max_hops, const Monitor& monitor) {
  if (encoder.trainable()) throw std::invalid_argument("retrieval fine-tuning needs a frozen encoder");
  const auto train_set = retrieval_examples(kg, train, encoder, max_hops, false);
  const auto valid_set = retrieval_examples(kg, valid, encoder, max_hops, true);
  spdlog::info("retrieval fine-tuning: {} instances, {} skipped as answer-uncovered", train_set.examples.size(),
               train_set.uncovered);
  return fit_kl("retrieval", train_set.examples, valid_set.examples, std::move(init), config,
                config.retrieval_epochs, monitor);
}

FitResult finetune_reasoning(const KnowledgeGraph& kg, std::span<const QAInstance> train,
                             std::span<const Subgraph> train_subgraphs, std::span<const QAInstance> valid,
                             std::span<const Subgraph> valid_subgraphs, ModelParams init, Encoder& encoder,
                             const TrainConfig& config, const Monitor& monitor) {
  if (encoder.trainable()) throw std::invalid_argument("reasoning fine-tuning needs a frozen encoder");
  const auto train_set = reasoning_examples(kg, train, train_subgraphs, encoder, false);
  const auto valid_set = reasoning_examples(kg, valid, valid_subgraphs, encoder, true);
  spdlog::info("reasoning fine-tuning: {} instances, {} skipped as answer-uncovered", train_set.examples.size(),
               train_set.uncovered);
  return fit_kl("reasoning", train_set.examples, valid_set.examples, std::move(init), config,
                config.reasoning_epochs, monitor);
}

ModelParams transfer_params(const ModelParams& retrieval, const ModelDims& reasoning_dims) {
  retrieval.check_shapes();
  if (!(retrieval.dims == reasoning_dims)) {
    throw std::invalid_argument("retrieval and reasoning models differ in T, d or h");
  }
  return retrieval;
}

}  // namespace kgqa
