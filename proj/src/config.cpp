#include "kgqa/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>

namespace kgqa {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key, "not a number: '" + value + "'");
  return out;
}

std::string number_text(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field count(T RunConfig::*group, std::size_t T::*member) {
  return {[=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_number<std::size_t>("", v); }};
}

template <typename T>
Field real(T RunConfig::*group, double T::*member) {
  return {[=](const RunConfig& c) { return number_text(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_number<double>("", v); }};
}

Field path(std::filesystem::path RunConfig::Paths::*member) {
  return {[=](const RunConfig& c) { return (c.paths.*member).string(); },
          [=](RunConfig& c, const std::string& v) { c.paths.*member = v; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["paths.kg"] = path(&RunConfig::Paths::kg);
    f["paths.train"] = path(&RunConfig::Paths::train);
    f["paths.valid"] = path(&RunConfig::Paths::valid);
    f["paths.test"] = path(&RunConfig::Paths::test);
    f["paths.work"] = path(&RunConfig::Paths::work);
    f["paths.cache"] = path(&RunConfig::Paths::cache);

    f["model.T"] = count(&RunConfig::dims, &ModelDims::steps);
    f["model.d"] = count(&RunConfig::dims, &ModelDims::feature_dim);
    f["model.h"] = count(&RunConfig::dims, &ModelDims::text_dim);

    f["retrieval.K"] = count(&RunConfig::retrieval, &RetrievalOptions::top_k);
    f["retrieval.max_hops"] = {
        [](const RunConfig& c) { return std::to_string(c.retrieval.max_hops); },
        [](RunConfig& c, const std::string& v) { c.retrieval.max_hops = parse_number<int>("", v); }};
    f["retrieval.score"] = {
        [](const RunConfig& c) {
          return std::string(c.retrieval.score_mode == ScoreMode::Final ? "final" : "max_over_steps");
        },
        [](RunConfig& c, const std::string& v) {
          if (v == "final") c.retrieval.score_mode = ScoreMode::Final;
          else if (v == "max_over_steps") c.retrieval.score_mode = ScoreMode::MaxOverSteps;
          else throw ConfigError("", "expected final or max_over_steps, got '" + v + "'");
        }};

    f["train.temperature"] = real(&RunConfig::train, &TrainConfig::temperature);
    f["train.batch_size"] = count(&RunConfig::train, &TrainConfig::batch_size);
    f["train.negatives"] = count(&RunConfig::train, &TrainConfig::negatives);
    f["train.encoder_lr"] = real(&RunConfig::train, &TrainConfig::encoder_lr);
    f["train.lr"] = real(&RunConfig::train, &TrainConfig::lr);
    f["train.pretrain_epochs"] = count(&RunConfig::train, &TrainConfig::pretrain_epochs);
    f["train.retrieval_epochs"] = count(&RunConfig::train, &TrainConfig::retrieval_epochs);
    f["train.reasoning_epochs"] = count(&RunConfig::train, &TrainConfig::reasoning_epochs);
    f["train.beta1"] = real(&RunConfig::train, &TrainConfig::beta1);
    f["train.beta2"] = real(&RunConfig::train, &TrainConfig::beta2);
    f["train.epsilon"] = real(&RunConfig::train, &TrainConfig::epsilon);
    f["train.weight_decay"] = real(&RunConfig::train, &TrainConfig::weight_decay);
    f["train.target_smoothing"] = real(&RunConfig::train, &TrainConfig::target_smoothing);
    f["train.kl_direction"] = {
        [](const RunConfig& c) {
          return std::string(c.train.kl_direction == KlDirection::TargetFirst ? "target_first" : "prediction_first");
        },
        [](RunConfig& c, const std::string& v) {
          if (v == "target_first") c.train.kl_direction = KlDirection::TargetFirst;
          else if (v == "prediction_first") c.train.kl_direction = KlDirection::PredictionFirst;
          else throw ConfigError("", "expected target_first or prediction_first, got '" + v + "'");
        }};

    f["encoder.backend"] = {[](const RunConfig& c) { return c.encoder; },
                            [](RunConfig& c, const std::string& v) { c.encoder = v; }};
    f["answer.top_n"] = {[](const RunConfig& c) { return std::to_string(c.top_n); },
                         [](RunConfig& c, const std::string& v) { c.top_n = parse_number<std::size_t>("", v); }};

    f["eval.threshold"] = {[](const RunConfig& c) { return number_text(c.threshold); },
                           [](RunConfig& c, const std::string& v) { c.threshold = parse_number<double>("", v); }};

    f["synth.entities"] = count(&RunConfig::synth, &SynthConfig::entities);
    f["synth.relations"] = count(&RunConfig::synth, &SynthConfig::relations);
    f["synth.hops"] = count(&RunConfig::synth, &SynthConfig::hops);
    f["synth.templates"] = count(&RunConfig::synth, &SynthConfig::templates);
    f["synth.train"] = count(&RunConfig::synth, &SynthConfig::n_train);
    f["synth.valid"] = count(&RunConfig::synth, &SynthConfig::n_valid);
    f["synth.test"] = count(&RunConfig::synth, &SynthConfig::n_test);
    f["synth.background_triples"] = count(&RunConfig::synth, &SynthConfig::background_triples);
    f["synth.max_answers"] = count(&RunConfig::synth, &SynthConfig::max_answers);

    f["seed"] = {[](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("", v); }};
    return f;
  }();
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError(key, "unknown key");
  try {
    it->second.set(*this, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key, e.what());
  }
}

std::map<std::string, std::string> RunConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out[key] = field.get(*this);
  return out;
}

void RunConfig::validate() const {
  if (dims.steps < 1 || dims.feature_dim < 1 || dims.text_dim < 1) {
    throw ConfigError("model", "dimensions must be positive");
  }
  if (retrieval.top_k < 1) throw ConfigError("retrieval.K", "must be at least 1");
  if (retrieval.max_hops < 1) throw ConfigError("retrieval.max_hops", "must be at least 1");
  if (top_n < 1) throw ConfigError("answer.top_n", "must be at least 1");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
}

void apply_config(RunConfig& config, std::istream& in) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "line " + std::to_string(number) + ": expected 'key = value'");
    }
    config.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  apply_config(config, in);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
  config.set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

std::string canonical_text(const RunConfig& config) {
  std::ostringstream out;
  for (const auto& [key, value] : config.entries()) out << key << " = " << value << '\n';
  return out.str();
}

std::uint64_t fingerprint(const RunConfig& config) {
  std::uint64_t h = 14695981039346656037ull;
  for (const unsigned char c : canonical_text(config)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  const auto [ptr, ec] = std::to_chars(buf, buf + 16, fp, 16);
  std::string s(buf, ptr);
  return std::string(16 - s.size(), '0') + s;
}

std::filesystem::path cache_dir(const RunConfig& config) {
  if (const char* env = std::getenv("UNIKGQA_CACHE_DIR"); env != nullptr && *env != '\0') return env;
  return config.paths.cache;
}

ExperimentConfig experiment_config(const RunConfig& config) {
  ExperimentConfig e;
  e.dims = config.dims;
  e.train = config.train;
  e.retrieval = config.retrieval;
  e.seed = config.seed;
  return e;
}

}  // namespace kgqa
