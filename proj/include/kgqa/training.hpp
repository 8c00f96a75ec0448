#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kgqa/abstract_graph.hpp"
#include "kgqa/encoder.hpp"
#include "kgqa/kg.hpp"
#include "kgqa/model.hpp"

namespace kgqa {

enum class KlDirection {
  TargetFirst,      // D(target || prediction)
  PredictionFirst,  // D(prediction || target), needs a target with full support
};

struct TrainConfig {
  double temperature = 0.05;
  std::size_t batch_size = 40;
  std::size_t negatives = 1;  // sampled negatives per positive pair
  double encoder_lr = 1e-5;
  double lr = 5e-4;
  std::size_t pretrain_epochs = 20;
  std::size_t retrieval_epochs = 20;
  std::size_t reasoning_epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  KlDirection kl_direction = KlDirection::TargetFirst;
  /// Mixes the target with a uniform distribution: (1 - a) t + a / n.
  double target_smoothing = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam with decoupled weight decay over a fixed list of parameter blocks.
class AdamW {
 public:
  AdamW(double lr, const TrainConfig& config);

  void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  double lr_, beta1_, beta2_, epsilon_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- contrastive pre-training ---------------------------------------------

struct QRPair {
  std::string id;
  std::string question;
  std::string positive;               // relation label
  std::vector<std::string> relevant;  // every relation label of the instance's path set, sorted
};

double cosine(const Embedding& a, const Embedding& b);

/// Batch-mean contrastive loss. Candidates of pair i are its own positive plus
/// every other pair's positive and every sampled negative in the batch,
/// except labels in pair i's relevant set. Adds d(loss)/d(table) into
/// `table_grad` when given.
double contrastive_loss(const ToyEncoder& encoder, std::span<const QRPair> batch,
                        std::span<const std::vector<std::string>> negatives, double temperature,
                        Matrix* table_grad = nullptr);

struct QRExample {
  std::string id;
  std::string question;
  std::vector<std::string> relevant;
};

/// Shortest-path relation sets of each instance; instances with none are dropped.
std::vector<QRExample> qr_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances);

QRPair sample_pair(const QRExample& example, std::mt19937_64& rng);

/// Uniform draws (with replacement) from `pool` minus `pair.relevant`.
std::vector<std::string> sample_negatives(const QRPair& pair, std::span<const std::string> pool,
                                          std::size_t count, std::mt19937_64& rng);

struct EpochRecord {
  std::string phase;
  std::size_t epoch = 0;
  double loss = 0.0;
  double valid_hits = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

using Monitor = std::function<void(const EpochRecord&)>;

/// Trains the toy encoder table and freezes it afterwards. Negatives are
/// drawn from every relation label of `kg`.
std::vector<EpochRecord> pretrain_qrm(const KnowledgeGraph& kg, std::span<const QAInstance> instances,
                                      Encoder& encoder, const TrainConfig& config, const Monitor& monitor = {});

// ---- KL fine-tuning ---------------------------------------------------------

struct KlResult {
  double loss = 0.0;
  Vector logit_grad;
};

/// KL divergence between two distributions and its gradient with respect to
/// the logits that produced `pred` through a softmax.
KlResult kl_loss(const Vector& pred, const Vector& target, KlDirection direction = KlDirection::TargetFirst);

/// One question prepared for propagation with a frozen encoder.
struct KlExample {
  std::string id;
  PropagationGraph graph;
  Embedding question;
  Matrix relations;
  Vector target;                         // empty when uncovered
  std::vector<std::uint32_t> positives;  // nodes holding an answer
};

struct ExampleSet {
  std::vector<KlExample> examples;
  std::size_t uncovered = 0;  // dropped, or kept with empty targets
};

/// Abstract subgraph of the max_hops neighborhood of each instance.
ExampleSet retrieval_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances, Encoder& encoder,
                              int max_hops, bool keep_uncovered);

/// Plain subgraphs, one per instance, with targets over answer entities.
ExampleSet reasoning_examples(const KnowledgeGraph& kg, std::span<const QAInstance> instances,
                              std::span<const Subgraph> subgraphs, Encoder& encoder, bool keep_uncovered);

/// Fraction of examples whose best non-topic node holds an answer.
double example_hits(std::span<const KlExample> examples, const ModelParams& params);

struct FitResult {
  ModelParams params;  // best by validation Hits@1, or last without validation data
  std::vector<EpochRecord> history;  // epoch 0 is the untrained evaluation
  std::size_t best_epoch = 0;
};

FitResult fit_kl(const std::string& phase, std::span<const KlExample> train, std::span<const KlExample> valid,
                 ModelParams init, const TrainConfig& config, std::size_t epochs, const Monitor& monitor = {});

/// Gradient of the KL loss of one example, returning the loss.
double example_gradient(const KlExample& example, const ModelParams& params, const TrainConfig& config,
                        ModelParams& grad);

FitResult finetune_retrieval(const KnowledgeGraph& kg, std::span<const QAInstance> train,
                             std::span<const QAInstance> valid, ModelParams init, Encoder& encoder,
                             const TrainConfig& config, int max_hops, const Monitor& monitor = {});

FitResult finetune_reasoning(const KnowledgeGraph& kg, std::span<const QAInstance> train,
                             std::span<const Subgraph> train_subgraphs, std::span<const QAInstance> valid,
                             std::span<const Subgraph> valid_subgraphs, ModelParams init, Encoder& encoder,
                             const TrainConfig& config, const Monitor& monitor = {});

/// Deep copy of retrieval parameters as the reasoning initialization.
ModelParams transfer_params(const ModelParams& retrieval, const ModelDims& reasoning_dims);

}  // namespace kgqa
