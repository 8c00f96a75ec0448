#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "kgqa/config.hpp"
#include "kgqa/eval.hpp"
#include "kgqa/experiment.hpp"

#include "CLI11.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kgqa;

namespace {

struct Failure : std::runtime_error {
  Failure(std::string kind, const std::string& what, int code = 1)
      : std::runtime_error(what), kind(std::move(kind)), code(code) {}
  std::string kind;
  int code;
};

void error_line(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

struct Context {
  RunConfig cfg;
  std::uint64_t fp = 0;

  fs::path work(const std::string& name) const { return cfg.paths.work / name; }
  std::string fp_hex() const { return fingerprint_hex(fp); }
};

const fs::path& input(const fs::path& p, const std::string& key) {
  if (p.empty()) throw Failure("missing_input", key + " is not set");
  if (!fs::exists(p)) throw Failure("missing_input", key + " does not exist: " + p.string());
  return p;
}

const fs::path& artifact(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw Failure("missing_input", p.string() + " not found; run " + producer + " first");
  return p;
}

const fs::path& split_path(const Context& ctx, const std::string& split) {
  if (split == "train") return ctx.cfg.paths.train;
  if (split == "valid") return ctx.cfg.paths.valid;
  if (split == "test") return ctx.cfg.paths.test;
  throw Failure("usage", "unknown split '" + split + "'", 2);
}

KnowledgeGraph load_kg(const Context& ctx) { return KnowledgeGraph::load_tsv(input(ctx.cfg.paths.kg, "paths.kg")); }

std::vector<QAInstance> load_split(const Context& ctx, const KnowledgeGraph& kg, const std::string& split) {
  return load_questions(input(split_path(ctx, split), "paths." + split), kg);
}

std::vector<QAInstance> load_optional(const Context& ctx, const KnowledgeGraph& kg, const std::string& split) {
  if (split_path(ctx, split).empty()) return {};
  return load_split(ctx, kg, split);
}

void prepare_work(const Context& ctx) {
  fs::create_directories(ctx.cfg.paths.work);
  std::ofstream out(ctx.work("config.resolved"));
  out << "# fingerprint " << ctx.fp_hex() << '\n' << canonical_text(ctx.cfg);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Failure("missing_input", "cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Failure("parse", path.string() + " line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::ofstream out(path);
  if (!out) throw Failure("io", "cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

Monitor metrics_log(const Context& ctx) {
  auto out = std::make_shared<std::ofstream>(ctx.work("metrics.jsonl"), std::ios::app);
  return [out, fp = ctx.fp_hex(), seed = ctx.cfg.seed](const EpochRecord& r) {
    json row{{"phase", r.phase}, {"epoch", r.epoch}, {"loss", r.loss}, {"seconds", r.seconds},
             {"seed", seed},      {"config_fingerprint", fp}};
    row["valid_hits"] = std::isnan(r.valid_hits) ? json(nullptr) : json(r.valid_hits);
    *out << row.dump() << '\n';
    out->flush();
    spdlog::info("{} epoch {}: loss {:.4f}, valid Hits@1 {:.3f}", r.phase, r.epoch, r.loss, r.valid_hits);
  };
}

/// The question encoder shared by every trained phase.
std::unique_ptr<Encoder> phase_encoder(const Context& ctx) {
  if (ctx.cfg.encoder == "toy") {
    return make_encoder("toy:" + artifact(ctx.work("encoder.bin"), "pretrain").string(), ctx.cfg.dims.text_dim);
  }
  return make_encoder(ctx.cfg.encoder, ctx.cfg.dims.text_dim);
}

std::map<std::string, RetrievalResult> load_retrieved(const Context& ctx, const KnowledgeGraph& kg,
                                                      const std::string& split) {
  std::map<std::string, RetrievalResult> out;
  for (const auto& row : read_jsonl(artifact(ctx.work("retrieved-" + split + ".jsonl"), "retrieve"))) {
    auto r = retrieval_from_json(row, kg);
    out.emplace(r.id, std::move(r));
  }
  return out;
}

std::vector<Subgraph> subgraphs_for(std::span<const QAInstance> questions,
                                    const std::map<std::string, RetrievalResult>& retrieved) {
  std::vector<Subgraph> out;
  for (const auto& q : questions) {
    const auto it = retrieved.find(q.id);
    if (it == retrieved.end()) throw Failure("missing_input", "no retrieval result for question " + q.id);
    out.push_back(it->second.subgraph);
  }
  return out;
}

// ---- commands ---------------------------------------------------------------

json cmd_synth(const Context& ctx, const fs::path& out) {
  SynthConfig sc = ctx.cfg.synth;
  sc.seed = ctx.cfg.seed;
  const auto data = synth_dataset(sc);
  write_dataset(data, out);
  return {{"out", out.string()},
          {"triples", data.triples.size()},
          {"entities", data.kg.num_entities()},
          {"train", data.train.size()},
          {"valid", data.valid.size()},
          {"test", data.test.size()}};
}

json cmd_ingest(const Context& ctx) {
  const auto kg = load_kg(ctx);
  const fs::path cache = cache_dir(ctx.cfg);
  fs::create_directories(cache);
  json summary{{"kg", ctx.cfg.paths.kg.string()},
               {"entities", kg.num_entities()},
               {"relations", kg.num_relations()},
               {"triples", kg.num_triples()},
               {"config_fingerprint", ctx.fp_hex()}};
  for (const std::string split : {"train", "valid", "test"}) {
    if (split_path(ctx, split).empty()) continue;
    const auto questions = load_split(ctx, kg, split);
    std::vector<json> rows;
    std::size_t unreachable = 0, without = 0;
    for (const auto& q : questions) {
      const auto sup = shortest_path_relations(kg, q);
      unreachable += sup.unreachable_pairs;
      without += sup.relations.empty() ? 1 : 0;
      json labels = json::array();
      for (const RelationId r : sup.relations) labels.push_back(kg.relation_label(r));
      rows.push_back({{"id", q.id}, {"relations", labels}, {"unreachable_pairs", sup.unreachable_pairs}});
    }
    write_jsonl(cache / ("supervision-" + split + ".jsonl"), rows);
    summary["splits"][split] = {
        {"questions", questions.size()}, {"unreachable_pairs", unreachable}, {"without_paths", without}};
  }
  std::ofstream(cache / "ingest.json") << summary.dump(2) << '\n';
  summary["cache"] = cache.string();
  return summary;
}

json cmd_pretrain(const Context& ctx) {
  if (ctx.cfg.encoder != "toy") throw Failure("usage", "pretraining needs encoder.backend = toy", 2);
  const auto kg = load_kg(ctx);
  const auto train = load_split(ctx, kg, "train");
  prepare_work(ctx);
  auto encoder = build_encoder(kg, train, ctx.cfg.dims.text_dim, ctx.cfg.seed);
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.cfg.seed;
  const auto history = pretrain_qrm(kg, train, *encoder, tc, metrics_log(ctx));
  const auto path = ctx.work("encoder.bin");
  encoder->save(path);
  return {{"encoder", path.string()}, {"final_loss", history.empty() ? json(nullptr) : json(history.back().loss)}};
}

json cmd_train_retriever(const Context& ctx, bool no_pretrain) {
  const auto kg = load_kg(ctx);
  const auto train = load_split(ctx, kg, "train");
  const auto valid = load_optional(ctx, kg, "valid");
  prepare_work(ctx);
  std::unique_ptr<Encoder> encoder;
  if (no_pretrain) {
    if (ctx.cfg.encoder != "toy") throw Failure("usage", "--no-pretrain needs encoder.backend = toy", 2);
    auto fresh = build_encoder(kg, train, ctx.cfg.dims.text_dim, ctx.cfg.seed);
    fresh->freeze();
    fresh->save(ctx.work("encoder-untrained.bin"));
    encoder = std::move(fresh);
  } else {
    encoder = phase_encoder(ctx);
  }
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.cfg.seed;
  const auto fit = finetune_retrieval(kg, train, valid, ModelParams::glorot(ctx.cfg.dims, ctx.cfg.seed + 1), *encoder,
                                      tc, ctx.cfg.retrieval.max_hops, metrics_log(ctx));
  const auto path = ctx.work("retriever.ckpt");
  save_checkpoint(path, fit.params, encoder->reference(), ctx.fp);
  return {{"checkpoint", path.string()},
          {"best_epoch", fit.best_epoch},
          {"valid_hits", fit.history[fit.best_epoch].valid_hits}};
}

json cmd_retrieve(const Context& ctx, const std::vector<std::string>& splits, bool dump_abstract) {
  const auto kg = load_kg(ctx);
  const auto ckpt = load_checkpoint(artifact(ctx.work("retriever.ckpt"), "train-retriever"));
  if (ckpt.params.dims != ctx.cfg.dims) throw Failure("config", "retriever.ckpt dims differ from model.*", 2);
  auto encoder = make_encoder(ckpt.encoder_reference, ctx.cfg.dims.text_dim);
  prepare_work(ctx);
  json summary = json::object();
  for (const auto& split : splits) {
    if (split_path(ctx, split).empty()) continue;
    const auto questions = load_split(ctx, kg, split);
    const auto results = retrieve_all(questions, kg, ckpt.params, *encoder, ctx.cfg.retrieval);
    std::vector<json> rows;
    for (const auto& r : results) {
      auto row = to_json(r, kg);
      row["config_fingerprint"] = ctx.fp_hex();
      rows.push_back(std::move(row));
    }
    write_jsonl(ctx.work("retrieved-" + split + ".jsonl"), rows);
    if (dump_abstract) {
      std::vector<json> graphs;
      for (const auto& q : questions) {
        const auto sub = k_hop_subgraph(kg, q.topic_entities, ctx.cfg.retrieval.max_hops);
        graphs.push_back({{"id", q.id}, {"abstract", to_json(abstract_subgraph(sub, q.topic_entities), kg)}});
      }
      write_jsonl(ctx.work("abstract-" + split + ".jsonl"), graphs);
    }
    summary[split] = {{"questions", results.size()}, {"coverage", coverage_rate(results)}};
  }
  return summary;
}

json cmd_train_reasoner(const Context& ctx, const std::optional<fs::path>& init_from, bool no_transfer) {
  const auto kg = load_kg(ctx);
  const auto train = load_split(ctx, kg, "train");
  const auto valid = load_optional(ctx, kg, "valid");
  const auto retriever = load_checkpoint(artifact(ctx.work("retriever.ckpt"), "train-retriever"));
  auto encoder = make_encoder(retriever.encoder_reference, ctx.cfg.dims.text_dim);
  const auto train_subs = subgraphs_for(train, load_retrieved(ctx, kg, "train"));
  const auto valid_subs = valid.empty() ? std::vector<Subgraph>{} : subgraphs_for(valid, load_retrieved(ctx, kg, "valid"));
  prepare_work(ctx);

  const bool transfer = init_from.has_value() && !no_transfer;
  ModelParams init = ModelParams::glorot(ctx.cfg.dims, ctx.cfg.seed + 2);
  if (transfer) {
    const auto source = load_checkpoint(input(*init_from, "--init-from"));
    try {
      init = transfer_params(source.params, ctx.cfg.dims);
    } catch (const std::invalid_argument& e) {
      throw Failure("config", e.what(), 2);
    }
  }
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.cfg.seed;
  const auto fit =
      finetune_reasoning(kg, train, train_subs, valid, valid_subs, std::move(init), *encoder, tc, metrics_log(ctx));
  const auto path = ctx.work("reasoner.ckpt");
  save_checkpoint(path, fit.params, encoder->reference(), ctx.fp);
  return {{"checkpoint", path.string()},
          {"transfer", transfer},
          {"epoch0_valid_hits", fit.history.front().valid_hits},
          {"best_epoch", fit.best_epoch},
          {"valid_hits", fit.history[fit.best_epoch].valid_hits}};
}

json cmd_answer(const Context& ctx, const std::vector<std::string>& splits) {
  const auto kg = load_kg(ctx);
  const auto ckpt = load_checkpoint(artifact(ctx.work("reasoner.ckpt"), "train-reasoner"));
  if (ckpt.params.dims != ctx.cfg.dims) throw Failure("config", "reasoner.ckpt dims differ from model.*", 2);
  auto encoder = make_encoder(ckpt.encoder_reference, ctx.cfg.dims.text_dim);
  prepare_work(ctx);
  json summary = json::object();
  for (const auto& split : splits) {
    if (split_path(ctx, split).empty()) continue;
    const auto questions = load_split(ctx, kg, split);
    const auto retrieved = load_retrieved(ctx, kg, split);
    std::vector<json> rows;
    for (const auto& q : questions) {
      const auto it = retrieved.find(q.id);
      if (it == retrieved.end()) throw Failure("missing_input", "no retrieval result for question " + q.id);
      const auto& r = it->second;
      const auto ranked = answer(q, r.subgraph, kg, ckpt.params, *encoder, ctx.cfg.top_n);
      auto row = answers_to_json(q.id, ranked, kg, r.covered, r.subgraph.entities.size());
      row["config_fingerprint"] = ctx.fp_hex();
      rows.push_back(std::move(row));
    }
    write_jsonl(ctx.work("answers-" + split + ".jsonl"), rows);
    summary[split] = {{"questions", rows.size()}};
  }
  return summary;
}

std::vector<AnswerRecord> records_for(std::span<const QAInstance> gold, const fs::path& results,
                                      const KnowledgeGraph& kg) {
  std::map<std::string, AnswerRecord> by_id;
  for (const auto& row : read_jsonl(results)) {
    auto rec = answer_record_from_json(row, kg);
    by_id.emplace(rec.id, std::move(rec));
  }
  std::vector<AnswerRecord> out;
  for (const auto& q : gold) {
    const auto it = by_id.find(q.id);
    out.push_back(it == by_id.end() ? AnswerRecord{q.id, {}, false, 0} : it->second);
  }
  return out;
}

json cmd_eval(const Context& ctx, fs::path results, fs::path gold, fs::path valid_results, fs::path valid_gold,
              fs::path out) {
  const auto kg = load_kg(ctx);
  if (results.empty()) results = ctx.work("answers-test.jsonl");
  if (gold.empty()) gold = ctx.cfg.paths.test;
  if (valid_results.empty() && fs::exists(ctx.work("answers-valid.jsonl"))) valid_results = ctx.work("answers-valid.jsonl");
  if (valid_gold.empty()) valid_gold = ctx.cfg.paths.valid;
  if (out.empty()) out = ctx.work("report.json");

  const auto questions = load_questions(input(gold, "gold questions"), kg);
  const auto records = records_for(questions, input(results, "results"), kg);
  double threshold = ctx.cfg.threshold;
  if (!valid_results.empty() && !valid_gold.empty()) {
    const auto vq = load_questions(input(valid_gold, "validation questions"), kg);
    threshold = choose_threshold(records_for(vq, input(valid_results, "validation results"), kg), vq);
  }
  auto report = evaluate(questions, records, threshold);
  report.fingerprint = ctx.fp;
  report.seed = ctx.cfg.seed;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  auto j = report.to_json();
  j["config_fingerprint"] = ctx.fp_hex();
  std::ofstream(out) << j.dump(2) << '\n';
  return {{"report", out.string()},
          {"hits_at_1", report.hits_at_1},
          {"f1", report.f1},
          {"coverage_rate", report.coverage},
          {"f1_threshold", threshold}};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("kgqa"));

  CLI::App app{"Retrieve-then-reason question answering over a knowledge graph"};
  app.require_subcommand(0, 1);
  std::string config_file, data_dir, work_dir, phase;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override one key, e.g. --set retrieval.K=5");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--data", data_dir, "directory with triples.tsv and train/valid/test.jsonl");
  app.add_option("--work", work_dir, "directory for checkpoints and outputs");
  app.add_option("--phase", phase, "run a command by name");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  auto* synth = app.add_subcommand("synth-data", "write a synthetic planted-path dataset");
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  app.add_subcommand("ingest", "validate the KG and questions, cache path supervision");
  app.add_subcommand("pretrain", "contrastive question-relation pre-training");
  auto* train_retriever = app.add_subcommand("train-retriever", "fine-tune on abstract subgraphs");
  bool no_pretrain = false;
  train_retriever->add_flag("--no-pretrain", no_pretrain, "use an untrained encoder");
  auto* retrieve_cmd = app.add_subcommand("retrieve", "top-K subgraph retrieval");
  std::vector<std::string> retrieve_splits{"train", "valid", "test"};
  bool dump_abstract = false;
  retrieve_cmd->add_option("--split", retrieve_splits, "splits to retrieve");
  retrieve_cmd->add_flag("--dump-abstract", dump_abstract, "also write the abstract subgraphs");
  auto* train_reasoner = app.add_subcommand("train-reasoner", "fine-tune on retrieved subgraphs");
  std::optional<std::string> init_from;
  bool no_transfer = false;
  train_reasoner->add_option("--init-from", init_from, "retriever checkpoint to transfer from");
  train_reasoner->add_flag("--no-transfer", no_transfer, "ignore --init-from and start fresh");
  auto* answer_cmd = app.add_subcommand("answer", "rank answers over retrieved subgraphs");
  std::vector<std::string> answer_splits{"valid", "test"};
  answer_cmd->add_option("--split", answer_splits, "splits to answer");
  auto* eval = app.add_subcommand("eval", "score answers against gold questions");
  std::string results, gold, valid_results, valid_gold, report_out;
  eval->add_option("--results", results, "answers JSONL (default: work/answers-test.jsonl)");
  eval->add_option("--gold", gold, "gold questions JSONL (default: paths.test)");
  eval->add_option("--valid-results", valid_results, "validation answers for the F1 threshold");
  eval->add_option("--valid-gold", valid_gold, "validation questions (default: paths.valid)");
  eval->add_option("--out", report_out, "report path (default: work/report.json)");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << app.help();
    error_line("usage", e.what());
    return 2;
  }

  std::string command = app.get_subcommands().empty() ? phase : app.get_subcommands().front()->get_name();
  if (command.empty()) {
    std::cerr << app.help();
    error_line("usage", "no command given");
    return 2;
  }
  if (!phase.empty() && phase != command) {
    error_line("usage", "--phase " + phase + " conflicts with command " + command);
    return 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    Context ctx;
    if (!config_file.empty()) apply_config_file(ctx.cfg, config_file);
    if (!data_dir.empty()) {
      ctx.cfg.paths.kg = fs::path(data_dir) / "triples.tsv";
      ctx.cfg.paths.train = fs::path(data_dir) / "train.jsonl";
      ctx.cfg.paths.valid = fs::path(data_dir) / "valid.jsonl";
      ctx.cfg.paths.test = fs::path(data_dir) / "test.jsonl";
    }
    for (const auto& o : overrides) apply_override(ctx.cfg, o);
    if (seed) ctx.cfg.seed = *seed;
    if (!work_dir.empty()) ctx.cfg.paths.work = work_dir;
    ctx.cfg.validate();
    ctx.fp = fingerprint(ctx.cfg);

    json summary;
    if (command == "synth-data") {
      if (synth_out.empty()) throw Failure("usage", "synth-data needs --out", 2);
      summary = cmd_synth(ctx, synth_out);
    } else if (command == "ingest") {
      summary = cmd_ingest(ctx);
    } else if (command == "pretrain") {
      summary = cmd_pretrain(ctx);
    } else if (command == "train-retriever") {
      summary = cmd_train_retriever(ctx, no_pretrain);
    } else if (command == "retrieve") {
      summary = cmd_retrieve(ctx, retrieve_splits, dump_abstract);
    } else if (command == "train-reasoner") {
      std::optional<fs::path> from;
      if (init_from) from = fs::path(*init_from);
      summary = cmd_train_reasoner(ctx, from, no_transfer);
    } else if (command == "answer") {
      summary = cmd_answer(ctx, answer_splits);
    } else if (command == "eval") {
      summary = cmd_eval(ctx, results, gold, valid_results, valid_gold, report_out);
    } else {
      std::cerr << app.help();
      throw Failure("usage", "unknown command '" + command + "'", 2);
    }
    summary["command"] = command;
    summary["config_fingerprint"] = ctx.fp_hex();
    std::cout << summary.dump() << '\n';
    return 0;
  } catch (const Failure& f) {
    error_line(f.kind, f.what());
    return f.code;
  } catch (const ConfigError& e) {
    error_line("config", e.what());
    return 2;
  } catch (const kgqa::ParseError& e) {
    error_line("parse", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("runtime", e.what());
    return 1;
  }
}
