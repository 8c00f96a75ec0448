#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kgqa/kg.hpp"

namespace kgqa {

struct SynthConfig {
  std::size_t entities = 500;
  std::size_t relations = 12;
  std::size_t hops = 2;
  std::size_t templates = 0;  // relation sequences in use, 0 for all
  std::size_t n_train = 200;
  std::size_t n_valid = 50;
  std::size_t n_test = 100;
  std::size_t background_triples = 1000;
  std::size_t max_answers = 3;
  std::uint64_t seed = 0;
};

/// Random KG with planted relation paths. Relations are split into one class
/// per hop so that the words of a question identify the relation of each hop.
struct SynthDataset {
  std::vector<KnowledgeGraph::LabeledTriple> triples;
  KnowledgeGraph kg;
  std::vector<std::vector<RelationId>> templates;
  std::vector<QAInstance> train, valid, test;
};

SynthDataset synth_dataset(const SynthConfig& config);

/// triples.tsv plus train/valid/test .jsonl under `dir`.
void write_dataset(const SynthDataset& data, const std::filesystem::path& dir);

}  // namespace kgqa
