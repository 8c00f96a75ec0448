#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>

#include "kgqa/experiment.hpp"
#include "kgqa/model.hpp"
#include "kgqa/pipeline.hpp"
#include "kgqa/synth.hpp"
#include "kgqa/training.hpp"

namespace kgqa {

/// Bad key or value in a config file or override; a usage error.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  struct Paths {
    std::filesystem::path kg;
    std::filesystem::path train, valid, test;
    std::filesystem::path work = "run";
    std::filesystem::path cache = ".kgqa-cache";
  } paths;
  ModelDims dims{3, 32, 32};
  RetrievalOptions retrieval;
  TrainConfig train;
  std::string encoder = "toy";  // toy, file:<path> or remote:<url>
  std::size_t top_n = 20;
  double threshold = 0.5;  // F1 threshold without validation answers
  SynthConfig synth;
  std::uint64_t seed = 0;

  /// Sets one dotted key from its text form. Throws ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Every key with its text value, in key order.
  std::map<std::string, std::string> entries() const;
  void validate() const;
};

/// Reads `key = value` lines; '#' starts a comment.
void apply_config(RunConfig& config, std::istream& in);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
/// "key=value" from the command line.
void apply_override(RunConfig& config, const std::string& assignment);

/// Canonical `key = value` text, one line per key in key order.
std::string canonical_text(const RunConfig& config);
/// FNV-1a 64 of the canonical text.
std::uint64_t fingerprint(const RunConfig& config);
std::string fingerprint_hex(std::uint64_t fp);

/// paths.cache unless UNIKGQA_CACHE_DIR is set and nonempty.
std::filesystem::path cache_dir(const RunConfig& config);

ExperimentConfig experiment_config(const RunConfig& config);

}  // namespace kgqa
