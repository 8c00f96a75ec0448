#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "kgqa/eval.hpp"
#include "kgqa/model.hpp"
#include "kgqa/pipeline.hpp"
#include "kgqa/synth.hpp"
#include "kgqa/training.hpp"

namespace kgqa {

struct ExperimentConfig {
  ModelDims dims{3, 32, 32};
  TrainConfig train;
  RetrievalOptions retrieval;
  bool pretrain = true;
  bool transfer = true;
  std::uint64_t seed = 0;
};

struct ExperimentResult {
  std::vector<EpochRecord> pretrain;
  FitResult retrieval;
  FitResult reasoning;
  std::vector<RetrievalResult> train_retrieved, valid_retrieved, test_retrieved;
  double reasoning_epoch0_test_hits = 0.0;
  EvalReport report;
  std::unique_ptr<ToyEncoder> encoder;
};

/// Toy encoder whose vocabulary covers the training questions and relation labels.
std::unique_ptr<ToyEncoder> build_encoder(const KnowledgeGraph& kg, std::span<const QAInstance> questions,
                                          std::size_t dim, std::uint64_t seed);

/// Test Hits@1 of reasoning over already retrieved subgraphs.
double reasoning_hits(const KnowledgeGraph& kg, std::span<const QAInstance> questions,
                      std::span<const RetrievalResult> retrieved, const ModelParams& params, Encoder& encoder);

/// pretrain -> train retriever -> retrieve -> transfer -> train reasoner -> answer.
ExperimentResult run_experiment(const SynthDataset& data, const ExperimentConfig& config,
                                const Monitor& monitor = {});

struct ReasoningOutcome {
  FitResult fit;
  double epoch0_test_hits = 0.0;
  EvalReport report;
};

/// Trains a reasoner over the retrieval of `done`, initialized by transfer
/// from its retriever or fresh, and evaluates it on the test split.
ReasoningOutcome run_reasoning(const SynthDataset& data, const ExperimentConfig& config, const ExperimentResult& done,
                               bool transfer, const Monitor& monitor = {});

}  // namespace kgqa
