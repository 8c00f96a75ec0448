#include "kgqa/experiment.hpp"

#include <spdlog/spdlog.h>

namespace kgqa {

std::unique_ptr<ToyEncoder> build_encoder(const KnowledgeGraph& kg, std::span<const QAInstance> questions,
                                          std::size_t dim, std::uint64_t seed) {
  std::vector<std::string> corpus;
  for (const auto& q : questions) corpus.push_back(q.question);
  for (std::uint32_t r = 0; r < kg.num_relations(); ++r) corpus.push_back(relation_text(kg.relation_label(RelationId{r})));
  return ToyEncoder::build(corpus, dim, seed);
}

double reasoning_hits(const KnowledgeGraph& kg, std::span<const QAInstance> questions,
                      std::span<const RetrievalResult> retrieved, const ModelParams& params, Encoder& encoder) {
  if (questions.empty()) return 0.0;
  double hits = 0.0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto ranked = answer(questions[i], retrieved[i].subgraph, kg, params, encoder, 1);
    hits += hits_at_1(ranked, questions[i].answers).hit;
  }
  return hits / static_cast<double>(questions.size());
}

namespace {

std::vector<Subgraph> subgraphs_of(std::span<const RetrievalResult> results) {
  std::vector<Subgraph> out;
  for (const auto& r : results) out.push_back(r.subgraph);
  return out;
}

}  // namespace

ExperimentResult run_experiment(const SynthDataset& data, const ExperimentConfig& config, const Monitor& monitor) {
  const auto& kg = data.kg;
  ExperimentResult res;
  res.encoder = build_encoder(kg, data.train, config.dims.text_dim, config.seed);
  TrainConfig train = config.train;
  train.seed = config.seed;
  if (config.pretrain) {
    res.pretrain = pretrain_qrm(kg, data.train, *res.encoder, train, monitor);
  } else {
    res.encoder->freeze();
  }
  auto& enc = *res.encoder;

  res.retrieval = finetune_retrieval(kg, data.train, data.valid, ModelParams::glorot(config.dims, config.seed + 1),
                                     enc, train, config.retrieval.max_hops, monitor);
  res.train_retrieved = retrieve_all(data.train, kg, res.retrieval.params, enc, config.retrieval);
  res.valid_retrieved = retrieve_all(data.valid, kg, res.retrieval.params, enc, config.retrieval);
  res.test_retrieved = retrieve_all(data.test, kg, res.retrieval.params, enc, config.retrieval);
  spdlog::info("retrieval coverage: train {:.3f}, valid {:.3f}, test {:.3f}", coverage_rate(res.train_retrieved),
               coverage_rate(res.valid_retrieved), coverage_rate(res.test_retrieved));

  auto outcome = run_reasoning(data, config, res, config.transfer, monitor);
  res.reasoning = std::move(outcome.fit);
  res.reasoning_epoch0_test_hits = outcome.epoch0_test_hits;
  res.report = std::move(outcome.report);
  return res;
}

ReasoningOutcome run_reasoning(const SynthDataset& data, const ExperimentConfig& config, const ExperimentResult& done,
                               bool transfer, const Monitor& monitor) {
  const auto& kg = data.kg;
  auto& enc = *done.encoder;
  TrainConfig train = config.train;
  train.seed = config.seed;
  ReasoningOutcome out;
  ModelParams init = transfer ? transfer_params(done.retrieval.params, config.dims)
                              : ModelParams::glorot(config.dims, config.seed + 2);
  out.epoch0_test_hits = reasoning_hits(kg, data.test, done.test_retrieved, init, enc);
  const auto train_subs = subgraphs_of(done.train_retrieved);
  const auto valid_subs = subgraphs_of(done.valid_retrieved);
  out.fit = finetune_reasoning(kg, data.train, train_subs, data.valid, valid_subs, std::move(init), enc, train,
                               monitor);

  const std::size_t all = kg.num_entities();
  auto answer_all = [&](std::span<const QAInstance> qs, std::span<const RetrievalResult> retrieved) {
    std::vector<AnswerRecord> records;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      const auto& r = retrieved[i];
      records.push_back({qs[i].id, answer(qs[i], r.subgraph, kg, out.fit.params, enc, all), r.covered,
                         r.subgraph.entities.size()});
    }
    return records;
  };
  const auto valid_answers = answer_all(data.valid, done.valid_retrieved);
  const double threshold = data.valid.empty() ? 0.5 : choose_threshold(valid_answers, data.valid);
  out.report = evaluate(data.test, answer_all(data.test, done.test_retrieved), threshold);
  out.report.seed = config.seed;
  return out;
}

}  // namespace kgqa
