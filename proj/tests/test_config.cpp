#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "kgqa/config.hpp"

using namespace kgqa;

namespace {

RunConfig from_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  apply_config(c, in);
  return c;
}

}  // namespace

TEST_CASE("defaults follow the reference hyperparameters") {
  const RunConfig c;
  CHECK(c.train.temperature == 0.05);
  CHECK(c.train.encoder_lr == 1e-5);
  CHECK(c.train.lr == 5e-4);
  CHECK(c.dims.steps == 3);
  CHECK(c.retrieval.top_k == 10);
  CHECK(c.retrieval.max_hops == 2);
  CHECK(c.retrieval.score_mode == ScoreMode::Final);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("key = value files with comments") {
  const auto c = from_text(
      "# comment\n"
      "retrieval.K = 15\n"
      "  model.T=4   # trailing comment\n"
      "\n"
      "train.lr = 2.5e-3\n"
      "retrieval.score = max_over_steps\n"
      "train.kl_direction = prediction_first\n"
      "train.target_smoothing = 0.1\n"
      "paths.kg = some dir/kg.tsv\n"
      "seed = 42\n");
  CHECK(c.retrieval.top_k == 15);
  CHECK(c.dims.steps == 4);
  CHECK(c.train.lr == 2.5e-3);
  CHECK(c.retrieval.score_mode == ScoreMode::MaxOverSteps);
  CHECK(c.train.kl_direction == KlDirection::PredictionFirst);
  CHECK(c.paths.kg == "some dir/kg.tsv");
  CHECK(c.seed == 42);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("overrides win over file values") {
  auto c = from_text("retrieval.K = 15\n");
  apply_override(c, "retrieval.K=5");
  CHECK(c.retrieval.top_k == 5);
  apply_override(c, " train.batch_size = 8 ");
  CHECK(c.train.batch_size == 8);
}

TEST_CASE("bad keys and values are config errors naming the key") {
  RunConfig c;
  auto key_of = [&](const std::string& assignment) {
    try {
      apply_override(c, assignment);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("no error");
  };
  CHECK(key_of("no.such=1") == "no.such");
  CHECK(key_of("retrieval.K=ten") == "retrieval.K");
  CHECK(key_of("retrieval.K=-1") == "retrieval.K");
  CHECK(key_of("train.lr=0.1x") == "train.lr");
  CHECK(key_of("retrieval.score=sum") == "retrieval.score");
  CHECK(key_of("model.T") == "model.T");
  CHECK_THROWS_AS(from_text("just words\n"), ConfigError);
}

TEST_CASE("validation rejects unusable settings") {
  RunConfig c;
  c.dims.feature_dim = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.retrieval.top_k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.train.kl_direction = KlDirection::PredictionFirst;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.train.target_smoothing = 0.1;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("canonical text round-trips and fixes the fingerprint") {
  auto c = from_text("retrieval.K = 7\ntrain.lr = 0.003\nencoder.backend = file:/tmp/x.bin\n");
  const auto text = canonical_text(c);
  const auto back = from_text(text);
  CHECK(canonical_text(back) == text);
  CHECK(fingerprint(back) == fingerprint(c));
  CHECK(c.entries().size() == static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));

  auto other = c;
  apply_override(other, "retrieval.K=8");
  CHECK(fingerprint(other) != fingerprint(c));
  CHECK(fingerprint_hex(fingerprint(c)).size() == 16);
  CHECK(fingerprint_hex(1) == "0000000000000001");
}

TEST_CASE("fingerprint is FNV-1a over the canonical text") {
  const RunConfig c;
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char ch : canonical_text(c)) {
    h = (h ^ ch) * 0x100000001b3ull;
  }
  CHECK(fingerprint(c) == h);
}

TEST_CASE("cache directory from the environment") {
  RunConfig c;
  c.paths.cache = "from-config";
  ::unsetenv("UNIKGQA_CACHE_DIR");
  CHECK(cache_dir(c) == "from-config");
  ::setenv("UNIKGQA_CACHE_DIR", "/tmp/elsewhere", 1);
  CHECK(cache_dir(c) == "/tmp/elsewhere");
  ::setenv("UNIKGQA_CACHE_DIR", "", 1);
  CHECK(cache_dir(c) == "from-config");
  ::unsetenv("UNIKGQA_CACHE_DIR");
}

TEST_CASE("experiment settings mirror the run config") {
  auto c = from_text("model.T = 4\nretrieval.K = 3\ntrain.lr = 0.01\nseed = 9\n");
  const auto e = experiment_config(c);
  CHECK(e.dims.steps == 4);
  CHECK(e.retrieval.top_k == 3);
  CHECK(e.train.lr == 0.01);
  CHECK(e.seed == 9);
}
