#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kgqa/abstract_graph.hpp"
#include "kgqa/encoder.hpp"
#include "kgqa/kg.hpp"
#include "kgqa/model.hpp"

namespace kgqa {

/// Which scores rank abstract nodes for top-K selection.
enum class ScoreMode {
  Final,         // s^(T)
  MaxOverSteps,  // max_t s^(t)
};

struct RetrievalOptions {
  std::size_t top_k = 10;
  int max_hops = 2;
  ScoreMode score_mode = ScoreMode::Final;
};

struct RetrievalResult {
  std::string id;
  Subgraph subgraph;
  std::vector<std::pair<AbstractId, double>> selected;  // by descending score
  std::size_t abstract_nodes = 0;
  bool covered = false;
};

/// Abstracts the max_hops neighborhood, scores it with `params` and keeps the
/// subgraph induced by the top-K abstract nodes plus the topic entities.
RetrievalResult retrieve(const QAInstance& question, const KnowledgeGraph& kg, const ModelParams& params,
                         Encoder& encoder, const RetrievalOptions& options);

/// retrieve() over many questions on `threads` workers (0 = hardware
/// concurrency). Results keep the question order.
std::vector<RetrievalResult> retrieve_all(std::span<const QAInstance> questions, const KnowledgeGraph& kg,
                                          const ModelParams& params, Encoder& encoder,
                                          const RetrievalOptions& options, unsigned threads = 0);

struct RankedAnswer {
  EntityId entity;
  double score;
};

/// Entities of `subgraph` ranked by the reasoning scores, topics excluded,
/// ties by ascending id.
std::vector<RankedAnswer> answer(const QAInstance& question, const Subgraph& subgraph, const KnowledgeGraph& kg,
                                 const ModelParams& params, Encoder& encoder, std::size_t top_n);

nlohmann::json to_json(const RetrievalResult& result, const KnowledgeGraph& kg);
RetrievalResult retrieval_from_json(const nlohmann::json& j, const KnowledgeGraph& kg);
nlohmann::json answers_to_json(const std::string& id, std::span<const RankedAnswer> ranked, const KnowledgeGraph& kg,
                               bool covered, std::size_t subgraph_size);

}  // namespace kgqa
