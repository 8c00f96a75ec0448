#include "kgqa/synth.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

namespace kgqa {

namespace {

const std::vector<std::string> kRelationWords{
    "spouse",  "employer", "birthplace", "director", "author",   "founder",  "capital",  "mentor",
    "sibling", "publisher", "owner",     "coach",    "producer", "designer", "sponsor",  "editor",
    "rival",   "landlord", "composer",   "curator",  "pilot",    "sculptor", "narrator", "translator"};

std::string relation_label(std::size_t k) { return "synth.rel." + kRelationWords[k]; }

std::string question_text(const std::vector<std::size_t>& words, const std::string& topic) {
  std::string q = words.size() == 1 ? "what is the " : "who is the ";
  for (std::size_t i = words.size(); i-- > 0;) {
    q += kRelationWords[words[i]];
    q += i == 0 ? " of " : " of the ";
  }
  return q + topic;
}

struct Candidate {
  std::size_t topic;
  std::size_t templ;
};

}  // namespace

SynthDataset synth_dataset(const SynthConfig& c) {
  if (c.hops < 1 || c.hops > 3) throw std::invalid_argument("hops must be 1, 2 or 3");
  if (c.relations < 4 || c.relations > kRelationWords.size()) {
    throw std::invalid_argument("relations must lie in [4, " + std::to_string(kRelationWords.size()) + "]");
  }
  if (c.relations < 2 * c.hops) throw std::invalid_argument("need at least two relations per hop");
  const std::size_t total = c.n_train + c.n_valid + c.n_test;
  if (c.entities < 4 * (c.hops + 1) || c.entities < total / 2) {
    throw std::invalid_argument("too few entities for the requested questions");
  }

  std::mt19937_64 rng(c.seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  // Hop h uses relations h, h + hops, h + 2 hops, ...
  std::vector<std::vector<std::size_t>> all_templates{{}};
  for (std::size_t h = 0; h < c.hops; ++h) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& prefix : all_templates) {
      for (std::size_t r = h; r < c.relations; r += c.hops) {
        auto t = prefix;
        t.push_back(r);
        next.push_back(std::move(t));
      }
    }
    all_templates = std::move(next);
  }
  std::shuffle(all_templates.begin(), all_templates.end(), rng);
  if (c.templates > 0 && c.templates < all_templates.size()) all_templates.resize(c.templates);

  auto entity = [](std::size_t i) { return "e" + std::to_string(i); };
  std::vector<KnowledgeGraph::LabeledTriple> triples;
  // Every relation appears at least once.
  for (std::size_t k = 0; k < c.relations; ++k) triples.push_back({entity(k), relation_label(k), entity(k + 1)});
  for (std::size_t i = 0; i < c.background_triples; ++i) {
    const std::size_t h = pick(c.entities);
    std::size_t t = pick(c.entities - 1);
    if (t >= h) ++t;
    triples.push_back({entity(h), relation_label(pick(c.relations)), entity(t)});
  }
  std::vector<Candidate> candidates;
  std::set<std::pair<std::size_t, std::size_t>> used;
  for (std::size_t attempt = 0; candidates.size() < 2 * total && attempt < 20 * total; ++attempt) {
    const Candidate cand{pick(c.entities), pick(all_templates.size())};
    if (!used.insert({cand.topic, cand.templ}).second) continue;
    std::size_t at = cand.topic;
    for (const std::size_t r : all_templates[cand.templ]) {
      std::size_t next = pick(c.entities - 1);
      if (next >= at) ++next;
      triples.push_back({entity(at), relation_label(r), entity(next)});
      at = next;
    }
    candidates.push_back(cand);
  }
  auto graph = KnowledgeGraph::from_labeled(triples);
  SynthDataset data{std::move(triples), std::move(graph), {}, {}, {}, {}};
  const auto& kg = data.kg;
  for (const auto& t : all_templates) {
    std::vector<RelationId> ids;
    for (const std::size_t r : t) ids.push_back(*kg.find_relation(relation_label(r)));
    data.templates.push_back(std::move(ids));
  }

  std::vector<QAInstance> accepted;
  for (const auto& cand : candidates) {
    if (accepted.size() == total) break;
    const EntityId topic = *kg.find_entity(entity(cand.topic));
    const auto& path = data.templates[cand.templ];
    std::vector<EntityId> frontier{topic};
    for (const RelationId r : path) {
      std::vector<EntityId> next;
      for (const EntityId e : frontier) {
        for (const auto& t : kg.outgoing(e)) {
          if (t.relation == r) next.push_back(t.tail);
        }
      }
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      frontier = std::move(next);
    }
    if (frontier.empty() || frontier.size() > c.max_answers) continue;
    const std::vector<EntityId> seeds{topic};
    const auto dist = hop_distances(kg, seeds, static_cast<int>(c.hops));
    const bool exact = std::all_of(frontier.begin(), frontier.end(), [&](EntityId a) {
      return dist[index(a)] == static_cast<int>(c.hops);
    });
    if (!exact) continue;

    std::vector<std::size_t> words(all_templates[cand.templ]);
    QAInstance inst{"q" + std::to_string(accepted.size()), question_text(words, entity(cand.topic)), {topic},
                    frontier};
    auto expected = path;
    std::sort(expected.begin(), expected.end());
    if (shortest_path_relations(kg, inst).relations != expected) continue;
    accepted.push_back(std::move(inst));
  }
  if (accepted.size() < total) {
    throw std::runtime_error("synthetic generation infeasible: only " + std::to_string(accepted.size()) + " of " +
                             std::to_string(total) + " questions satisfy the path constraints");
  }
  data.train.assign(accepted.begin(), accepted.begin() + static_cast<std::ptrdiff_t>(c.n_train));
  data.valid.assign(accepted.begin() + static_cast<std::ptrdiff_t>(c.n_train),
                    accepted.begin() + static_cast<std::ptrdiff_t>(c.n_train + c.n_valid));
  data.test.assign(accepted.begin() + static_cast<std::ptrdiff_t>(c.n_train + c.n_valid), accepted.end());
  return data;
}

void write_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "triples.tsv");
    if (!out) throw std::runtime_error("cannot write " + (dir / "triples.tsv").string());
    for (const auto& t : data.triples) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  const std::pair<const char*, const std::vector<QAInstance>*> splits[] = {
      {"train.jsonl", &data.train}, {"valid.jsonl", &data.valid}, {"test.jsonl", &data.test}};
  for (const auto& [name, qs] : splits) {
    std::ofstream out(dir / name);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    write_questions(out, *qs, data.kg);
  }
}

}  // namespace kgqa
