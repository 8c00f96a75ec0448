#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "kgqa/training.hpp"
#include "support.hpp"

using namespace kgqa;
namespace kt = kgqa::testing;

namespace {

Vector random_simplex(std::mt19937_64& rng, std::size_t n, bool sparse = false) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Vector v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = (sparse && rng() % 3 == 0) ? 0.0 : u(rng);
  if (v.sum() == 0.0) v[0] = 1.0;
  return v / v.sum();
}

Vector softmax(const Vector& z) {
  Vector e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

std::uint64_t table_checksum(const ToyEncoder& enc) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(enc.table().data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(enc.table().size()) * sizeof(double); ++i) {
    h = (h ^ bytes[i]) * 1099511628211ull;
  }
  return h;
}

const std::vector<std::string> kWords{"colour", "owner", "maker", "parent", "sibling"};

// Topic i has one tail per relation; question i asks for one of them.
struct OneHopSet {
  KnowledgeGraph kg;
  std::vector<QAInstance> train, valid;
};

OneHopSet one_hop_set(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<KnowledgeGraph::LabeledTriple> triples;
  std::vector<std::pair<std::string, std::size_t>> asked;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string topic = "t" + std::to_string(i);
    for (std::size_t w = 0; w < kWords.size(); ++w) {
      triples.push_back({topic, "kb.rel." + kWords[w], "x" + std::to_string(i) + "_" + std::to_string(w)});
    }
    asked.emplace_back(topic, rng() % kWords.size());
  }
  OneHopSet set{KnowledgeGraph::from_labeled(triples), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = asked[i].second;
    QAInstance q{"q" + std::to_string(i), "what is the " + kWords[w] + " of " + asked[i].first,
                 {*set.kg.find_entity(asked[i].first)},
                 {*set.kg.find_entity("x" + std::to_string(i) + "_" + std::to_string(w))}};
    (i % 4 == 3 ? set.valid : set.train).push_back(std::move(q));
  }
  return set;
}

std::unique_ptr<ToyEncoder> corpus_encoder(const KnowledgeGraph& kg, std::span<const QAInstance> qs,
                                           std::size_t dim, std::uint64_t seed) {
  std::vector<std::string> corpus;
  for (const auto& q : qs) corpus.push_back(q.question);
  for (std::uint32_t r = 0; r < kg.num_relations(); ++r) corpus.push_back(relation_text(kg.relation_label(RelationId{r})));
  return ToyEncoder::build(corpus, dim, seed);
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.kl_direction = KlDirection::PredictionFirst;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.target_smoothing = 0.1;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("AdamW first step") {
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamW opt(0.01, c);
  std::vector<double> x{1.0, -2.0};
  const std::vector<double> g{0.5, -3.0};
  opt.step({std::span<double>(x)}, {std::span<const double>(g)});
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps) after decay.
  CHECK(x[0] == doctest::Approx(1.0 * (1 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(x[1] == doctest::Approx(-2.0 * (1 - 0.001) + 0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(opt.steps() == 1);
}

TEST_CASE("kl_loss") {
  SUBCASE("identical distributions") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
      const Vector s = random_simplex(rng, 1 + rng() % 12, true);
      const auto r = kl_loss(s, s);
      CHECK(r.loss == 0.0);
      CHECK(r.logit_grad.isZero());
    }
  }
  SUBCASE("one-hot against uniform is log n") {
    const Vector pred = Vector::Constant(7, 1.0 / 7);
    Vector target = Vector::Zero(7);
    target[3] = 1.0;
    CHECK(kl_loss(pred, target).loss == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  }
  SUBCASE("matches a term-by-term sum") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
      const Vector p = random_simplex(rng, 6), t = random_simplex(rng, 6, true);
      double a = 0;
      for (int k = 0; k < 6; ++k) {
        if (t[k] > 0) a += t[k] * std::log(t[k] / p[k]);
      }
      CHECK(std::abs(kl_loss(p, t).loss - a) <= 1e-12);
      const Vector tf = random_simplex(rng, 6);
      double c = 0;
      for (int k = 0; k < 6; ++k) c += p[k] * std::log(p[k] / tf[k]);
      CHECK(std::abs(kl_loss(p, tf, KlDirection::PredictionFirst).loss - c) <= 1e-12);
    }
  }
  SUBCASE("nonnegative") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
      const std::size_t n = 1 + rng() % 9;
      CHECK(kl_loss(random_simplex(rng, n), random_simplex(rng, n, true)).loss >= 0.0);
    }
  }
  SUBCASE("logit gradients match central differences") {
    std::mt19937_64 rng(4);
    for (const auto dir : {KlDirection::TargetFirst, KlDirection::PredictionFirst}) {
      for (int i = 0; i < 10; ++i) {
        Vector z = kt::random_matrix(rng, 5, 1);
        const Vector t = random_simplex(rng, 5, dir == KlDirection::TargetFirst);
        const Vector g = kl_loss(softmax(z), t, dir).logit_grad;
        for (int k = 0; k < 5; ++k) {
          const double numeric = kt::central_difference([&] { return kl_loss(softmax(z), t, dir).loss; }, z[k]);
          CHECK(kt::relative_error(g[k], numeric) <= 1e-6);
        }
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(kl_loss(Vector{{1.0, 0.0}}, Vector{{0.5, 0.5}}), std::domain_error);
    CHECK_THROWS_AS(kl_loss(Vector{{0.5, 0.5}}, Vector{{1.0, 0.0}}, KlDirection::PredictionFirst),
                    std::domain_error);
    CHECK_THROWS_AS(kl_loss(Vector{{0.5, 0.6}}, Vector{{0.5, 0.5}}), std::invalid_argument);
    CHECK_THROWS_AS(kl_loss(Vector{{1.0}}, Vector{{0.5, 0.5}}), std::invalid_argument);
  }
}

TEST_CASE("contrastive loss closed forms") {
  const std::vector<std::string> corpus{"who owns x", "what colour is y", "who made z", "kb rel owner colour maker parent"};
  auto enc = ToyEncoder::build(corpus, 4, 2);

  SUBCASE("a single pair without negatives has zero loss") {
    const std::vector<QRPair> batch{{"a", "who owns x", "kb.rel.owner", {"kb.rel.owner"}}};
    CHECK(contrastive_loss(*enc, batch, {}, 0.05) == 0.0);
  }
  SUBCASE("infinite temperature gives log 2M") {
    const std::vector<QRPair> batch{{"a", "who owns x", "kb.rel.owner", {"kb.rel.owner"}},
                                    {"b", "what colour is y", "kb.rel.colour", {"kb.rel.colour"}},
                                    {"c", "who made z", "kb.rel.maker", {"kb.rel.maker"}}};
    const std::vector<std::vector<std::string>> negatives{{"kb.rel.parent"}, {"kb.rel.sibling"}, {"kb.rel.x"}};
    CHECK(contrastive_loss(*enc, batch, negatives, 1e12) == doctest::Approx(std::log(6.0)).epsilon(1e-9));
  }
  SUBCASE("relevant relations of a pair are not its negatives") {
    const std::vector<QRPair> batch{{"a", "who owns x", "kb.rel.owner", {"kb.rel.owner"}},
                                    {"b", "who owns y", "kb.rel.owner", {"kb.rel.owner"}}};
    CHECK(contrastive_loss(*enc, batch, {}, 1e12) == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("contrastive gradient matches central differences") {
  const std::vector<std::string> corpus{"who owns the maker of x", "what colour is y", "who made z",
                                        "kb rel owner colour maker parent inverse"};
  auto enc = ToyEncoder::build(corpus, 4, 9);
  const std::vector<QRPair> batch{
      {"a", "who owns the maker of x", "kb.rel.owner", {"kb.rel.maker", "kb.rel.owner"}},
      {"b", "what colour is y", "kb.rel.colour", {"kb.rel.colour"}},
      {"c", "who made z", "kb.rel.maker^-1", {"kb.rel.maker^-1"}}};
  const std::vector<std::vector<std::string>> negatives{{"kb.rel.parent"}, {"kb.rel.maker"}, {"kb.rel.owner^-1"}};
  for (const double tau : {0.05, 1.0}) {
    Matrix grad = Matrix::Zero(enc->table().rows(), 4);
    contrastive_loss(*enc, batch, negatives, tau, &grad);
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      const double numeric = kt::central_difference(
          [&] { return contrastive_loss(*enc, batch, negatives, tau); }, enc->table().data()[i]);
      CHECK(kt::relative_error(grad.data()[i], numeric) <= 1e-4);
    }
  }
}

TEST_CASE("negative sampling avoids relevant relations") {
  std::mt19937_64 rng(5);
  const QRPair pair{"a", "q", "r1", {"r1", "r2"}};
  const std::vector<std::string> pool{"r1", "r2", "r3", "r4"};
  const auto negs = sample_negatives(pair, pool, 50, rng);
  CHECK(negs.size() == 50);
  for (const auto& n : negs) CHECK((n == "r3" || n == "r4"));
  const std::vector<std::string> only{"r1"};
  CHECK(sample_negatives(pair, only, 3, rng).empty());
}

TEST_CASE("pre-training separates positives from negatives") {
  auto set = one_hop_set(40, 1);
  auto enc = corpus_encoder(set.kg, set.train, 16, 3);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.encoder_lr = 0.01;
  cfg.pretrain_epochs = 40;
  const auto before = table_checksum(*enc);
  std::vector<EpochRecord> seen;
  const auto history = pretrain_qrm(set.kg, set.train, *enc, cfg, [&](const EpochRecord& r) { seen.push_back(r); });
  CHECK(history.size() == 40);
  CHECK(seen.size() == 40);
  CHECK(history.back().loss < history.front().loss);
  CHECK(table_checksum(*enc) != before);
  CHECK_FALSE(enc->trainable());

  std::size_t separated = 0, total = 0;
  for (const auto& q : set.valid) {
    const auto sup = shortest_path_relations(set.kg, q);
    const std::string pos = set.kg.relation_label(*sup.relations.begin());
    const Embedding qv = enc->encode(q.question, TextKind::Question);
    for (const auto& w : kWords) {
      const std::string neg = "kb.rel." + w;
      if (neg == pos) continue;
      ++total;
      separated += cosine(qv, enc->encode(pos, TextKind::Relation)) > cosine(qv, enc->encode(neg, TextKind::Relation));
    }
  }
  CHECK(static_cast<double>(separated) / static_cast<double>(total) >= 0.95);

  CHECK_THROWS_AS(pretrain_qrm(set.kg, set.train, *enc, cfg), std::invalid_argument);
}

TEST_CASE("example gradient matches central differences") {
  std::mt19937_64 rng(12);
  for (const auto dir : {KlDirection::TargetFirst, KlDirection::PredictionFirst}) {
    TrainConfig cfg;
    cfg.kl_direction = dir;
    cfg.target_smoothing = dir == KlDirection::PredictionFirst ? 0.1 : 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      KlExample ex;
      ex.graph = kt::random_propagation_graph(rng, 8);
      ex.question = kt::random_matrix(rng, 1, 4);
      ex.relations = kt::random_matrix(rng, ex.graph.relations.size(), 4);
      ex.target = random_simplex(rng, ex.graph.num_nodes, true);
      auto p = ModelParams::glorot(ModelDims{3, 4, 4}, rng());
      ModelParams grad = ModelParams::zeros(p.dims);
      example_gradient(ex, p, cfg, grad);
      auto blocks = p.blocks();
      const auto gblocks = grad.blocks();
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        for (std::size_t i = 0; i < blocks[b].size(); ++i) {
          ModelParams scratch = ModelParams::zeros(p.dims);
          const double numeric = kt::central_difference(
              [&] { return example_gradient(ex, p, cfg, scratch); }, blocks[b][i]);
          CHECK(kt::relative_error(gblocks[b][i], numeric) <= 1e-4);
        }
      }
    }
  }
}

TEST_CASE("single-node example has zero loss and gradient") {
  KlExample ex;
  ex.graph.num_nodes = 1;
  ex.graph.topics = {0};
  ex.question = Embedding::Ones(3);
  ex.relations = Matrix(0, 3);
  ex.target = Vector::Ones(1);
  const auto p = ModelParams::glorot(ModelDims{3, 3, 3}, 1);
  ModelParams grad = ModelParams::zeros(p.dims);
  CHECK(example_gradient(ex, p, TrainConfig{}, grad) == 0.0);
  CHECK(grad == ModelParams::zeros(p.dims));
}

TEST_CASE("retrieval fine-tuning") {
  auto set = one_hop_set(60, 2);
  auto enc = corpus_encoder(set.kg, set.train, 8, 4);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 0.02;
  cfg.retrieval_epochs = 5;
  const auto init = ModelParams::glorot(ModelDims{2, 8, 8}, 7);

  CHECK_THROWS_AS(finetune_retrieval(set.kg, set.train, set.valid, init, *enc, cfg, 1), std::invalid_argument);
  enc->freeze();
  const auto enc_before = table_checksum(*enc);
  const auto init_before = init.checksum();

  const auto a = finetune_retrieval(set.kg, set.train, set.valid, init, *enc, cfg, 1);
  REQUIRE(a.history.size() == 6);
  for (std::size_t e = 1; e < a.history.size(); ++e) CHECK(a.history[e].loss < a.history[e - 1].loss);
  CHECK(table_checksum(*enc) == enc_before);
  CHECK(init.checksum() == init_before);
  CHECK_FALSE(a.params == init);

  const auto b = finetune_retrieval(set.kg, set.train, set.valid, init, *enc, cfg, 1);
  CHECK(a.params == b.params);
  CHECK(a.best_epoch == b.best_epoch);

  const std::vector<QAInstance> none;
  CHECK_THROWS_AS(finetune_retrieval(set.kg, none, set.valid, init, *enc, cfg, 1), std::invalid_argument);
}

TEST_CASE("reasoning fine-tuning skips uncovered instances") {
  auto set = one_hop_set(12, 3);
  auto enc = corpus_encoder(set.kg, set.train, 6, 4);
  enc->freeze();
  std::vector<Subgraph> subs;
  for (const auto& q : set.train) subs.push_back(k_hop_subgraph(set.kg, q.topic_entities, 1));
  // Drop the answer from the first subgraph.
  subs[0] = induced_subgraph(set.kg, {set.train[0].topic_entities[0]});
  const auto examples = reasoning_examples(set.kg, set.train, subs, *enc, false);
  CHECK(examples.uncovered == 1);
  CHECK(examples.examples.size() == set.train.size() - 1);
  const auto kept = reasoning_examples(set.kg, set.train, subs, *enc, true);
  CHECK(kept.examples.size() == set.train.size());
  CHECK(kept.examples[0].target.size() == 0);
}

TEST_CASE("uniform target is fitted by a uniform prediction") {
  // Every node is an answer and the model cannot tell nodes apart.
  PropagationGraph g;
  g.num_nodes = 3;
  g.topics = {0};
  KlExample ex{"u", g, Embedding::Ones(2), Matrix(0, 2), Vector::Constant(3, 1.0 / 3), {0, 1, 2}};
  const auto p = ModelParams::zeros(ModelDims{2, 2, 2});
  ModelParams grad = ModelParams::zeros(p.dims);
  CHECK(example_gradient(ex, p, TrainConfig{}, grad) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("transfer_params") {
  const auto theta = ModelParams::glorot(ModelDims{3, 4, 5}, 1);
  auto gamma = transfer_params(theta, theta.dims);
  CHECK(gamma == theta);

  std::mt19937_64 rng(3);
  const auto g = kt::random_propagation_graph(rng, 8);
  const Matrix rel = kt::random_matrix(rng, g.relations.size(), 5);
  const Embedding q = kt::random_matrix(rng, 1, 5);
  CHECK(reason(g, q, rel, gamma) == reason(g, q, rel, theta));

  const auto before = theta.checksum();
  gamma.steps[0].query_proj(0, 0) += 1.0;
  gamma.score_vec[1] = 7.0;
  CHECK(theta.checksum() == before);

  CHECK_THROWS_AS(transfer_params(theta, ModelDims{4, 4, 5}), std::invalid_argument);
}
