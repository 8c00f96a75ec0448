#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kgqa/kg.hpp"
#include "kgqa/pipeline.hpp"

namespace kgqa {

struct HitResult {
  int hit = 0;
  bool flagged = false;  // empty ranking or empty gold set
};

HitResult hits_at_1(std::span<const RankedAnswer> ranked, std::span<const EntityId> gold);

/// Both sets empty gives 1, exactly one empty gives 0.
double f1_score(std::span<const EntityId> predicted, std::span<const EntityId> gold);

/// Output of answering one question.
struct AnswerRecord {
  std::string id;
  std::vector<RankedAnswer> ranked;
  bool covered = false;
  std::size_t subgraph_size = 0;
};

double coverage_rate(std::span<const RetrievalResult> results);
double coverage_rate(std::span<const AnswerRecord> records);

/// Entities whose score is at least `threshold`.
std::vector<EntityId> predicted_set(std::span<const RankedAnswer> ranked, double threshold);

inline constexpr std::array<double, 5> kThresholdGrid{0.01, 0.05, 0.1, 0.2, 0.5};

/// Grid value with the best mean F1, the smaller one on ties.
double choose_threshold(std::span<const AnswerRecord> answers, std::span<const QAInstance> gold);

struct QuestionRecord {
  std::string id;
  int hit = 0;
  double f1 = 0.0;
  bool covered = false;
  std::size_t subgraph_size = 0;
  bool flagged = false;
};

struct EvalReport {
  std::vector<QuestionRecord> records;
  double hits_at_1 = 0.0;
  double f1 = 0.0;
  double coverage = 0.0;
  double threshold = 0.0;
  std::uint64_t fingerprint = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Per-question records aggregated as plain means. answers[i] belongs to gold[i].
EvalReport evaluate(std::span<const QAInstance> gold, std::span<const AnswerRecord> answers, double threshold);

nlohmann::json to_json(const AnswerRecord& record, const KnowledgeGraph& kg);
AnswerRecord answer_record_from_json(const nlohmann::json& j, const KnowledgeGraph& kg);

}  // namespace kgqa
