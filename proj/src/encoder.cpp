#include "kgqa/encoder.hpp"

#include <cctype>
#include <fstream>
#include <mutex>
#include <random>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "binary_io.hpp"
#include "kgqa/kg.hpp"

namespace kgqa {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::string relation_text(std::string_view label) {
  bool inv = false;
  if (label.size() >= kInverseSuffix.size() &&
      label.substr(label.size() - kInverseSuffix.size()) == kInverseSuffix) {
    label.remove_suffix(kInverseSuffix.size());
    inv = true;
  }
  std::string text;
  text.reserve(label.size() + 8);
  for (const char ch : label) {
    text.push_back(ch == '.' || ch == '_' ? ' ' : static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  if (inv) text += " inverse";
  return text;
}

// ---- Encoder ---------------------------------------------------------------

std::string Encoder::cache_key(std::string_view text, TextKind kind) {
  std::string key(kind == TextKind::Question ? "q\x1f" : "r\x1f");
  key.append(text);
  return key;
}

void Encoder::check_dim(const Embedding& v) const {
  if (static_cast<std::size_t>(v.size()) != dim_) {
    throw EncoderError("encoder produced a vector of width " + std::to_string(v.size()) +
                       ", expected " + std::to_string(dim_));
  }
  if (!v.allFinite()) throw EncoderError("encoder produced a non-finite vector");
}

Embedding Encoder::encode(std::string_view text, TextKind kind) {
  const auto key = cache_key(text, kind);
  {
    std::shared_lock lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  Embedding v = compute(text, kind);
  check_dim(v);
  std::unique_lock lock(mutex_);
  return cache_.try_emplace(key, std::move(v)).first->second;
}

std::vector<Embedding> Encoder::encode_batch(std::span<const std::string> texts, TextKind kind) {
  std::vector<Embedding> out(texts.size());
  std::vector<std::string> misses;
  std::vector<std::size_t> miss_index;
  {
    std::shared_lock lock(mutex_);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (auto it = cache_.find(cache_key(texts[i], kind)); it != cache_.end()) {
        out[i] = it->second;
      } else {
        misses.push_back(texts[i]);
        miss_index.push_back(i);
      }
    }
  }
  if (misses.empty()) return out;

  std::vector<Embedding> computed;
  try {
    computed = compute_batch(misses, kind);
  } catch (const EncoderError& e) {
    if (!e.item()) throw;
    throw EncoderError(e.message(), e.retryable(), miss_index[*e.item()]);
  }
  if (computed.size() != misses.size()) throw EncoderError("encoder returned a short batch");
  std::unique_lock lock(mutex_);
  for (std::size_t k = 0; k < misses.size(); ++k) {
    check_dim(computed[k]);
    out[miss_index[k]] = cache_.try_emplace(cache_key(misses[k], kind), std::move(computed[k])).first->second;
  }
  return out;
}

std::vector<Embedding> Encoder::compute_batch(std::span<const std::string> texts, TextKind kind) {
  std::vector<Embedding> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      out.push_back(compute(texts[i], kind));
    } catch (const EncoderError& e) {
      throw EncoderError(e.message(), e.retryable(), i);
    }
  }
  return out;
}

void Encoder::clear_cache() {
  std::unique_lock lock(mutex_);
  cache_.clear();
}

std::size_t Encoder::cache_size() const {
  std::shared_lock lock(mutex_);
  return cache_.size();
}

// ---- ToyEncoder ------------------------------------------------------------

namespace {
constexpr char kToyMagic[5] = "KGTE";
constexpr char kEmbeddingMagic[5] = "KGEM";
constexpr std::uint32_t kToyVersion = 1;
}  // namespace

ToyEncoder::ToyEncoder(std::vector<std::string> vocabulary, Matrix table)
    : Encoder(static_cast<std::size_t>(table.cols())), vocabulary_(std::move(vocabulary)), table_(std::move(table)) {
  if (vocabulary_.empty() || static_cast<std::size_t>(table_.rows()) != vocabulary_.size()) {
    throw std::invalid_argument("toy encoder table must have one row per vocabulary entry");
  }
  for (std::size_t i = 1; i < vocabulary_.size(); ++i) rows_.emplace(vocabulary_[i], i);
}

std::unique_ptr<ToyEncoder> ToyEncoder::build(std::span<const std::string> corpus, std::size_t dim,
                                              std::uint64_t seed) {
  std::vector<std::string> vocab{"<unk>"};
  std::unordered_map<std::string, std::size_t> seen;
  for (const auto& text : corpus) {
    for (auto& tok : tokenize(text)) {
      if (seen.emplace(tok, vocab.size()).second) vocab.push_back(std::move(tok));
    }
  }
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(vocab.size() + dim));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  Matrix table(vocab.size(), dim);
  for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = uniform(rng);
  return std::make_unique<ToyEncoder>(std::move(vocab), std::move(table));
}

std::vector<std::size_t> ToyEncoder::token_rows(std::string_view text, TextKind kind) const {
  const auto tokens = kind == TextKind::Relation ? tokenize(relation_text(text)) : tokenize(text);
  std::vector<std::size_t> rows;
  rows.reserve(tokens.size());
  for (const auto& tok : tokens) {
    auto it = rows_.find(tok);
    rows.push_back(it == rows_.end() ? 0 : it->second);
  }
  if (rows.empty()) rows.push_back(0);
  return rows;
}

Embedding ToyEncoder::forward(std::span<const std::size_t> rows) const {
  Embedding sum = Embedding::Zero(table_.cols());
  for (const auto r : rows) sum += table_.row(static_cast<Eigen::Index>(r));
  sum /= static_cast<double>(rows.size());
  return sum.array().tanh().matrix();
}

void ToyEncoder::backward(std::span<const std::size_t> rows, const Embedding& output,
                          const Embedding& output_grad, Matrix& table_grad) const {
  const Embedding pre_grad =
      (output_grad.array() * (1.0 - output.array().square())).matrix() / static_cast<double>(rows.size());
  for (const auto r : rows) table_grad.row(static_cast<Eigen::Index>(r)) += pre_grad;
}

Embedding ToyEncoder::compute(std::string_view text, TextKind kind) {
  return forward(token_rows(text, kind));
}

void ToyEncoder::save(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write encoder checkpoint " + path.string());
  binary::put_magic(out, kToyMagic);
  binary::put<std::uint32_t>(out, kToyVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(dim()));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(vocabulary_.size()));
  binary::put<std::uint8_t>(out, frozen_ ? 1 : 0);
  for (std::size_t i = 0; i < vocabulary_.size(); ++i) {
    binary::put_string(out, vocabulary_[i]);
    for (Eigen::Index j = 0; j < table_.cols(); ++j) binary::put<double>(out, table_(static_cast<Eigen::Index>(i), j));
  }
  if (!out) throw std::runtime_error("failed writing encoder checkpoint " + path.string());
  origin_ = std::filesystem::absolute(path).string();
}

std::unique_ptr<ToyEncoder> ToyEncoder::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open encoder checkpoint " + path.string());
  binary::expect_magic(in, kToyMagic, "toy encoder checkpoint");
  if (binary::get<std::uint32_t>(in) != kToyVersion) {
    throw std::runtime_error("unsupported toy encoder checkpoint version");
  }
  const auto dim = binary::get<std::uint32_t>(in);
  const auto count = binary::get<std::uint32_t>(in);
  const bool frozen = binary::get<std::uint8_t>(in) != 0;
  std::vector<std::string> vocab;
  vocab.reserve(count);
  Matrix table(count, dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    vocab.push_back(binary::get_string(in));
    for (std::uint32_t j = 0; j < dim; ++j) table(i, j) = binary::get<double>(in);
  }
  auto enc = std::make_unique<ToyEncoder>(std::move(vocab), std::move(table));
  enc->frozen_ = frozen;
  enc->origin_ = std::filesystem::absolute(path).string();
  return enc;
}

// ---- FileEncoder -----------------------------------------------------------

FileEncoder::FileEncoder(std::size_t dim, std::unordered_map<std::string, Embedding> vectors,
                         std::string origin)
    : Encoder(dim), vectors_(std::move(vectors)), origin_(std::move(origin)) {}

std::unique_ptr<FileEncoder> FileEncoder::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  binary::expect_magic(in, kEmbeddingMagic, "embedding");
  const auto dim = binary::get<std::uint32_t>(in);
  const auto count = binary::get<std::uint32_t>(in);
  std::unordered_map<std::string, Embedding> vectors;
  vectors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto key = binary::get_string(in);
    Embedding v(dim);
    for (std::uint32_t j = 0; j < dim; ++j) v[j] = binary::get<float>(in);
    vectors.insert_or_assign(std::move(key), std::move(v));
  }
  return std::make_unique<FileEncoder>(dim, std::move(vectors), std::filesystem::absolute(path).string());
}

Embedding FileEncoder::compute(std::string_view text, TextKind) {
  auto it = vectors_.find(std::string(text));
  if (it == vectors_.end()) throw EncoderError("no precomputed embedding for '" + std::string(text) + "'");
  return it->second;
}

void write_embedding_file(const std::filesystem::path& path, std::size_t dim,
                          std::span<const EmbeddingRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embedding file " + path.string());
  binary::put_magic(out, kEmbeddingMagic);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.values.size() != dim) throw std::invalid_argument("embedding record has wrong width: " + r.key);
    binary::put_string(out, r.key);
    for (const float f : r.values) binary::put<float>(out, f);
  }
}

// ---- RemoteEncoder ---------------------------------------------------------

RemoteEncoder::RemoteEncoder(std::string url, std::size_t dim, std::chrono::milliseconds timeout,
                             int attempts)
    : Encoder(dim), url_(std::move(url)), timeout_(timeout), attempts_(attempts) {
  const auto scheme = url_.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("remote encoder url needs a scheme: " + url_);
  const auto slash = url_.find('/', scheme + 3);
  host_ = url_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url_.substr(slash);
}

Embedding RemoteEncoder::compute(std::string_view text, TextKind kind) {
  const std::string s(text);
  return compute_batch(std::span<const std::string>(&s, 1), kind).front();
}

std::vector<Embedding> RemoteEncoder::compute_batch(std::span<const std::string> texts, TextKind kind) {
  nlohmann::json body;
  auto& arr = body["texts"] = nlohmann::json::array();
  for (const auto& t : texts) arr.push_back(kind == TextKind::Relation ? relation_text(t) : t);
  const auto payload = body.dump();

  std::string last_error;
  for (int attempt = 1; attempt <= attempts_; ++attempt) {
    httplib::Client client(host_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    auto res = client.Post(path_, payload, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
    } else if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
    } else {
      std::vector<Embedding> out;
      try {
        const auto reply = nlohmann::json::parse(res->body);
        const auto& vectors = reply.at("vectors");
        if (vectors.size() != texts.size()) throw EncoderError("embedding response has wrong length");
        out.reserve(texts.size());
        for (const auto& v : vectors) {
          Embedding e(static_cast<Eigen::Index>(v.size()));
          for (std::size_t j = 0; j < v.size(); ++j) e[static_cast<Eigen::Index>(j)] = v[j].get<double>();
          out.push_back(std::move(e));
        }
      } catch (const nlohmann::json::exception& e) {
        throw EncoderError(std::string("malformed embedding response: ") + e.what());
      }
      return out;
    }
    spdlog::warn("embedding request to {} failed (attempt {}/{}): {}", url_, attempt, attempts_, last_error);
  }
  throw EncoderError("embedding service " + url_ + " unavailable: " + last_error, /*retryable=*/true);
}

std::unique_ptr<Encoder> make_encoder(std::string_view reference, std::size_t dim) {
  const auto colon = reference.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument("encoder reference must look like backend:location");
  }
  const auto backend = reference.substr(0, colon);
  const std::string location(reference.substr(colon + 1));
  std::unique_ptr<Encoder> enc;
  if (backend == "toy") {
    enc = ToyEncoder::load(location);
  } else if (backend == "file") {
    enc = FileEncoder::load(location);
  } else if (backend == "remote") {
    enc = std::make_unique<RemoteEncoder>(location, dim);
  } else {
    throw std::invalid_argument("unknown encoder backend '" + std::string(backend) + "'");
  }
  if (dim != 0 && enc->dim() != dim) {
    throw std::invalid_argument("encoder width " + std::to_string(enc->dim()) + " does not match h=" +
                                std::to_string(dim));
  }
  return enc;
}

}  // namespace kgqa
