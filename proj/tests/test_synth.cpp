#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "kgqa/synth.hpp"
#include "support.hpp"

using namespace kgqa;

namespace {

// "who is the w2 of the w1 of eN" -> {w1, w2} and eN
std::pair<std::vector<std::string>, std::string> parse_question(const std::string& q) {
  std::istringstream in(q);
  std::vector<std::string> tokens;
  for (std::string t; in >> t;) tokens.push_back(t);
  std::vector<std::string> words;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == "the") words.push_back(tokens[i + 1]);
  }
  return {{words.rbegin(), words.rend()}, tokens.back()};
}

// Forward expansion over the labeled triple list.
std::set<std::string> expand(const std::vector<KnowledgeGraph::LabeledTriple>& triples, const std::string& topic,
                             const std::vector<std::string>& words) {
  std::set<std::string> frontier{topic};
  for (const auto& w : words) {
    std::set<std::string> next;
    for (const auto& t : triples) {
      if (t.relation == "synth.rel." + w && frontier.count(t.head)) next.insert(t.tail);
    }
    frontier = std::move(next);
  }
  return frontier;
}

std::set<std::string> labels(const KnowledgeGraph& kg, std::span<const EntityId> ids) {
  std::set<std::string> out;
  for (const EntityId e : ids) out.insert(kg.entity_label(e));
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

SynthConfig small_config(std::uint64_t seed) {
  SynthConfig c;
  c.entities = 120;
  c.relations = 6;
  c.n_train = 20;
  c.n_valid = 5;
  c.n_test = 10;
  c.background_triples = 200;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("one hop with one template") {
  SynthConfig c = small_config(1);
  c.hops = 1;
  c.templates = 1;
  const auto data = synth_dataset(c);
  REQUIRE(data.templates.size() == 1);
  REQUIRE(data.templates[0].size() == 1);
  const std::string relation = data.kg.relation_label(data.templates[0][0]);
  for (const auto* split : {&data.train, &data.valid, &data.test}) {
    for (const auto& q : *split) {
      CHECK(q.question.rfind("what is the ", 0) == 0);
      const auto [words, topic] = parse_question(q.question);
      REQUIRE(words.size() == 1);
      CHECK("synth.rel." + words[0] == relation);
      CHECK(labels(data.kg, q.answers) == expand(data.triples, topic, words));
    }
  }
}

TEST_CASE("planted answers match an independent path oracle") {
  const auto data = synth_dataset(small_config(2));
  CHECK(data.train.size() == 20);
  CHECK(data.valid.size() == 5);
  CHECK(data.test.size() == 10);
  CHECK(data.templates.size() == 9);  // three relations per hop
  std::set<std::string> ids;
  for (const auto* split : {&data.train, &data.valid, &data.test}) {
    for (const auto& q : *split) {
      CHECK(ids.insert(q.id).second);
      const auto [words, topic] = parse_question(q.question);
      REQUIRE(words.size() == 2);
      REQUIRE(q.topic_entities.size() == 1);
      CHECK(data.kg.entity_label(q.topic_entities[0]) == topic);
      CHECK(labels(data.kg, q.answers) == expand(data.triples, topic, words));
      CHECK(!q.answers.empty());
      CHECK(q.answers.size() <= 3);

      const auto one = kgqa::testing::relaxation_khop(data.kg, q.topic_entities, 1);
      const auto two = kgqa::testing::relaxation_khop(data.kg, q.topic_entities, 2);
      std::set<RelationId> relations;
      for (const EntityId a : q.answers) {
        CHECK(two.count(a) == 1);
        CHECK(one.count(a) == 0);
        const auto found =
            kgqa::testing::enumerate_shortest_path_relations(data.kg, q.topic_entities[0], a, true, 2);
        relations.insert(found.begin(), found.end());
      }
      const std::set<RelationId> expected{kgqa::testing::rel(data.kg, "synth.rel." + words[0]),
                                          kgqa::testing::rel(data.kg, "synth.rel." + words[1])};
      CHECK(relations == expected);
    }
  }
}

TEST_CASE("relations split into one class per hop") {
  const auto data = synth_dataset(small_config(3));
  std::map<std::string, std::set<std::size_t>> positions;
  for (const auto& q : data.train) {
    const auto words = parse_question(q.question).first;
    for (std::size_t i = 0; i < words.size(); ++i) positions[words[i]].insert(i);
  }
  for (const auto& [word, where] : positions) CHECK(where.size() == 1);
}

TEST_CASE("output is byte-identical per seed") {
  const auto root = std::filesystem::temp_directory_path() / "kgqa_test_synth";
  std::filesystem::remove_all(root);
  write_dataset(synth_dataset(small_config(4)), root / "a");
  write_dataset(synth_dataset(small_config(4)), root / "b");
  write_dataset(synth_dataset(small_config(5)), root / "c");
  for (const char* name : {"triples.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"}) {
    const auto a = slurp(root / "a" / name);
    CHECK(!a.empty());
    CHECK(a == slurp(root / "b" / name));
  }
  CHECK(slurp(root / "a" / "triples.tsv") != slurp(root / "c" / "triples.tsv"));

  const auto kg = KnowledgeGraph::load_tsv(root / "a" / "triples.tsv");
  const auto test = load_questions(root / "a" / "test.jsonl", kg);
  const auto data = synth_dataset(small_config(4));
  REQUIRE(test.size() == data.test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    CHECK(test[i].question == data.test[i].question);
    CHECK(labels(kg, test[i].answers) == labels(data.kg, data.test[i].answers));
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("bad configurations are rejected") {
  SynthConfig c = small_config(0);
  c.hops = 0;
  CHECK_THROWS_AS(synth_dataset(c), std::invalid_argument);
  c = small_config(0);
  c.relations = 2;
  CHECK_THROWS_AS(synth_dataset(c), std::invalid_argument);
  c = small_config(0);
  c.entities = 10;
  CHECK_THROWS_AS(synth_dataset(c), std::invalid_argument);
  c = small_config(0);
  c.max_answers = 0;
  CHECK_THROWS_AS(synth_dataset(c), std::runtime_error);
}
