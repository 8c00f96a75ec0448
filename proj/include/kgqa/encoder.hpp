#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace kgqa {

using Embedding = Eigen::RowVectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class TextKind { Question, Relation };

class EncoderError : public std::runtime_error {
 public:
  EncoderError(const std::string& what, bool retryable = false,
               std::optional<std::size_t> item = std::nullopt)
      : std::runtime_error(item ? "batch item " + std::to_string(*item) + ": " + what : what),
        message_(what), retryable_(retryable), item_(item) {}

  bool retryable() const noexcept { return retryable_; }
  /// Position inside the batch passed to encode_batch(), when known.
  std::optional<std::size_t> item() const noexcept { return item_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  bool retryable_;
  std::optional<std::size_t> item_;
};

/// Lowercases and splits on whitespace and punctuation.
std::vector<std::string> tokenize(std::string_view text);

/// Relation label as text: dots and underscores become spaces, inverse
/// relations get a trailing "inverse" word.
std::string relation_text(std::string_view label);

/// Maps question and relation text to vectors of a fixed width. Results are
/// cached by (kind, exact string); the cache allows concurrent readers.
class Encoder {
 public:
  explicit Encoder(std::size_t dim) : dim_(dim) {}
  virtual ~Encoder() = default;
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  std::size_t dim() const noexcept { return dim_; }

  Embedding encode(std::string_view text, TextKind kind);
  std::vector<Embedding> encode_batch(std::span<const std::string> texts, TextKind kind);

  void clear_cache();
  std::size_t cache_size() const;

  virtual bool trainable() const { return false; }
  /// "<backend>:<location>", accepted by make_encoder().
  virtual std::string reference() const = 0;

 protected:
  virtual Embedding compute(std::string_view text, TextKind kind) = 0;
  virtual std::vector<Embedding> compute_batch(std::span<const std::string> texts, TextKind kind);

 private:
  static std::string cache_key(std::string_view text, TextKind kind);
  void check_dim(const Embedding& v) const;

  std::size_t dim_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Embedding> cache_;
};

/// Mean of token embedding rows followed by tanh. Row 0 is reserved for
/// unknown tokens.
class ToyEncoder final : public Encoder {
 public:
  ToyEncoder(std::vector<std::string> vocabulary, Matrix table);

  /// Vocabulary from every token of `corpus`, Glorot-uniform rows.
  static std::unique_ptr<ToyEncoder> build(std::span<const std::string> corpus, std::size_t dim,
                                           std::uint64_t seed);
  static std::unique_ptr<ToyEncoder> load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path);

  std::vector<std::size_t> token_rows(std::string_view text, TextKind kind) const;
  Embedding forward(std::span<const std::size_t> rows) const;
  /// Adds d(loss)/d(table) given d(loss)/d(output) for one encoded text.
  void backward(std::span<const std::size_t> rows, const Embedding& output,
                const Embedding& output_grad, Matrix& table_grad) const;

  Matrix& table() { return table_; }
  const Matrix& table() const noexcept { return table_; }
  const std::vector<std::string>& vocabulary() const noexcept { return vocabulary_; }

  bool trainable() const override { return !frozen_; }
  void freeze() { frozen_ = true; clear_cache(); }
  void unfreeze() { frozen_ = false; }
  std::string reference() const override { return "toy:" + origin_; }

 protected:
  Embedding compute(std::string_view text, TextKind kind) override;

 private:
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, std::size_t> rows_;
  Matrix table_;
  bool frozen_ = false;
  std::string origin_;
};

/// Precomputed vectors looked up by exact key. Relation keys are the raw
/// relation labels.
class FileEncoder final : public Encoder {
 public:
  FileEncoder(std::size_t dim, std::unordered_map<std::string, Embedding> vectors, std::string origin);
  static std::unique_ptr<FileEncoder> load(const std::filesystem::path& path);

  std::string reference() const override { return "file:" + origin_; }

 protected:
  Embedding compute(std::string_view text, TextKind kind) override;

 private:
  std::unordered_map<std::string, Embedding> vectors_;
  std::string origin_;
};

struct EmbeddingRecord {
  std::string key;
  std::vector<float> values;
};

void write_embedding_file(const std::filesystem::path& path, std::size_t dim,
                          std::span<const EmbeddingRecord> records);

/// Embedding service client: POST {"texts":[...]} -> {"vectors":[[...],...]}.
class RemoteEncoder final : public Encoder {
 public:
  RemoteEncoder(std::string url, std::size_t dim,
                std::chrono::milliseconds timeout = std::chrono::milliseconds(10000),
                int attempts = 3);

  std::string reference() const override { return "remote:" + url_; }

 protected:
  Embedding compute(std::string_view text, TextKind kind) override;
  std::vector<Embedding> compute_batch(std::span<const std::string> texts, TextKind kind) override;

 private:
  std::string url_;
  std::string host_;
  std::string path_;
  std::chrono::milliseconds timeout_;
  int attempts_;
};

/// Builds an encoder from a reference string such as "toy:/x/encoder.bin".
/// `dim` is required for remote backends and checked for the others.
std::unique_ptr<Encoder> make_encoder(std::string_view reference, std::size_t dim);

}  // namespace kgqa
