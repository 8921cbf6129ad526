#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pialm/autodiff.hpp"

namespace pialm {

enum class TokenizerMode { character, word };

std::string_view to_string(TokenizerMode mode);
TokenizerMode parse_tokenizer_mode(std::string_view text);

// Splits text into tokens: UTF-8 code points (invalid bytes stand alone) or
// whitespace-separated words.
std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode);

class Vocab {
 public:
  static constexpr TokenId unk_id = 0;
  static constexpr TokenId pad_id = 1;
  static constexpr std::string_view unk_token = "<unk>";
  static constexpr std::string_view pad_token = "<pad>";

  // Frequency-ranked, ties broken by byte order. max_size counts the two
  // reserved entries; 0 means unlimited.
  static Vocab build(std::string_view text, TokenizerMode mode, std::size_t max_size = 0);
  static Vocab from_tokens(std::vector<std::string> tokens, TokenizerMode mode);

  std::size_t size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(std::string_view token) const;  // unk_id when absent
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  // One token per line in id order, with \\ \n \r \t escaped.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path, TokenizerMode mode);

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.mode_ == b.mode_ && a.tokens_ == b.tokens_;
  }

 private:
  TokenizerMode mode_ = TokenizerMode::character;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::string escape_token(std::string_view token);
std::string unescape_token(std::string_view line);

std::string read_text_file(const std::string& path);

// Train/dev/test id streams in source order, encoded with a vocab built on the
// training split.
struct Corpus {
  Vocab vocab;
  std::vector<TokenId> train, dev, test;
};

struct CorpusOptions {
  TokenizerMode mode = TokenizerMode::character;
  std::size_t max_vocab = 0;
  std::size_t train_limit = 0;  // 0 keeps everything
  std::size_t dev_limit = 0;
  std::size_t test_limit = 0;
};

// Empty paths yield empty streams (the training path is required).
Corpus load_corpus(const std::string& train_path, const std::string& dev_path,
                   const std::string& test_path, const CorpusOptions& options);

struct BatchPlan {
  std::size_t L = 0;
  std::size_t batch_size = 0;
  bool shuffle = false;
  std::uint64_t seed = 0;
  // Drop the final piece when it is shorter than L (training).
  bool drop_short = false;

  std::size_t tokens_per_batch() const { return L * batch_size; }
};

struct Row {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;  // inputs shifted left by one stream position
  std::size_t stream_row = 0;    // contiguous stream this piece belongs to
  std::size_t offset = 0;        // stream index of inputs[0]
};

struct Batch {
  std::vector<Row> rows;
  std::size_t tokens() const;
};

// Cuts the stream's predictions into L-token pieces. Unshuffled, the pieces are
// dealt into batch_size contiguous row streams (row r of batch b continues row
// r of batch b-1); shuffled, they are permuted with the plan seed. A trailing
// partial batch is emitted short, never padded.
std::vector<Batch> segment(std::span<const TokenId> stream, const BatchPlan& plan);

}  // namespace pialm
