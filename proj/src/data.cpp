#include "pialm/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "pialm/errors.hpp"

namespace pialm {

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::character ? "char" : "word";
}

TokenizerMode parse_tokenizer_mode(std::string_view text) {
  if (text == "char" || text == "character") return TokenizerMode::character;
  if (text == "word") return TokenizerMode::word;
  throw ConfigError("unknown tokenizer '" + std::string(text) + "' (expected char or word)");
}

namespace {

// Length of the UTF-8 sequence starting at s[i], or 1 for an invalid lead or
// truncated sequence.
std::size_t utf8_length(std::string_view s, std::size_t i) {
  const auto lead = static_cast<unsigned char>(s[i]);
  std::size_t len = 1;
  if (lead >= 0xF0 && lead <= 0xF4) {
    len = 4;
  } else if (lead >= 0xE0) {
    len = lead <= 0xEF ? 3 : 1;
  } else if (lead >= 0xC2) {
    len = 2;
  }
  if (i + len > s.size()) return 1;
  for (std::size_t k = 1; k < len; ++k) {
    if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return 1;
  }
  return len;
}

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::character) {
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size();) {
      const std::size_t len = utf8_length(text, i);
      out.emplace_back(text.substr(i, len));
      i += len;
    }
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, TokenizerMode mode) {
  Vocab v;
  v.mode_ = mode;
  v.tokens_ = std::move(tokens);
  if (v.tokens_.size() < 2 || v.tokens_[0] != unk_token || v.tokens_[1] != pad_token) {
    throw FormatError("vocab must start with " + std::string(unk_token) + " and " +
                      std::string(pad_token));
  }
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("duplicate vocab entry '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::build(std::string_view text, TokenizerMode mode, std::size_t max_size) {
  if (text.empty()) throw ContractError("cannot build a vocabulary from empty text");
  if (max_size != 0 && max_size < 2) {
    throw ContractError("vocab max_size must leave room for the two reserved tokens");
  }
  std::vector<std::string> all = tokenize(text, mode);
  if (all.empty()) throw ContractError("text has no tokens to build a vocabulary from");
  std::map<std::string, std::size_t> counts;
  for (auto& tok : all) ++counts[std::move(tok)];
  counts.erase(std::string(unk_token));
  counts.erase(std::string(pad_token));
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is already byte-ordered, so a stable sort on count
  // leaves ties lexicographic.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(unk_token), std::string(pad_token)};
  for (auto& [tok, n] : ranked) {
    if (max_size != 0 && tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens), mode);
}

TokenId Vocab::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocab of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& tok : tokenize(text, mode_)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ == TokenizerMode::word && i > 0) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::string escape_token(std::string_view token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_token(std::string_view line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out += line[i];
      continue;
    }
    if (++i == line.size()) throw FormatError("dangling escape in vocab line");
    switch (line[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      default: throw FormatError(std::string("unknown escape \\") + line[i] + " in vocab line");
    }
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocab file " + path);
  for (const auto& tok : tokens_) out << escape_token(tok) << '\n';
  if (!out) throw FormatError("failed writing vocab file " + path);
}

Vocab Vocab::load(const std::string& path, TokenizerMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read vocab file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(unescape_token(line));
  return from_tokens(std::move(tokens), mode);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Corpus load_corpus(const std::string& train_path, const std::string& dev_path,
                   const std::string& test_path, const CorpusOptions& options) {
  if (train_path.empty()) throw ConfigError("a training file is required");
  const std::string train_text = read_text_file(train_path);
  if (train_text.empty()) throw ContractError("training file " + train_path + " is empty");
  Corpus corpus;
  corpus.vocab = Vocab::build(train_text, options.mode, options.max_vocab);
  auto encode = [&](const std::string& path, std::size_t limit) {
    std::vector<TokenId> ids;
    if (path.empty()) return ids;
    ids = corpus.vocab.encode(path == train_path ? train_text : read_text_file(path));
    if (limit != 0 && ids.size() > limit) ids.resize(limit);
    return ids;
  };
  corpus.train = encode(train_path, options.train_limit);
  corpus.dev = encode(dev_path, options.dev_limit);
  corpus.test = encode(test_path, options.test_limit);
  return corpus;
}

std::size_t Batch::tokens() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.inputs.size();
  return n;
}

std::vector<Batch> segment(std::span<const TokenId> stream, const BatchPlan& plan) {
  if (plan.L == 0 || plan.batch_size == 0) {
    throw ContractError("batch plan needs L >= 1 and batch_size >= 1");
  }
  if (stream.size() < 2 || stream.size() < plan.tokens_per_batch()) {
    throw ContractError("stream of " + std::to_string(stream.size()) +
                        " tokens is shorter than one batch of " +
                        std::to_string(plan.tokens_per_batch()));
  }
  const std::size_t predictions = stream.size() - 1;
  std::size_t n_pieces = predictions / plan.L;
  if (!plan.drop_short && predictions % plan.L != 0) ++n_pieces;
  if (n_pieces == 0) throw ContractError("stream holds no full piece of length " + std::to_string(plan.L));

  auto make_row = [&](std::size_t piece, std::size_t stream_row) {
    Row row;
    row.offset = piece * plan.L;
    const std::size_t len = std::min(plan.L, predictions - row.offset);
    row.inputs.assign(stream.begin() + static_cast<std::ptrdiff_t>(row.offset),
                      stream.begin() + static_cast<std::ptrdiff_t>(row.offset + len));
    row.targets.assign(stream.begin() + static_cast<std::ptrdiff_t>(row.offset + 1),
                       stream.begin() + static_cast<std::ptrdiff_t>(row.offset + len + 1));
    row.stream_row = stream_row;
    return row;
  };

  std::vector<Batch> batches;
  if (plan.shuffle) {
    std::vector<std::size_t> order(n_pieces);
    for (std::size_t i = 0; i < n_pieces; ++i) order[i] = i;
    std::mt19937_64 rng(plan.seed);
    for (std::size_t i = n_pieces; i > 1; --i) {
      std::swap(order[i - 1], order[rng() % i]);
    }
    for (std::size_t at = 0; at < n_pieces; at += plan.batch_size) {
      Batch b;
      for (std::size_t k = at; k < std::min(n_pieces, at + plan.batch_size); ++k) {
        b.rows.push_back(make_row(order[k], k - at));
      }
      batches.push_back(std::move(b));
    }
    return batches;
  }

  // Row r owns a contiguous run of pieces; the first n_pieces % B rows get one extra.
  const std::size_t rows = std::min(plan.batch_size, n_pieces);
  const std::size_t base = n_pieces / rows;
  const std::size_t extra = n_pieces % rows;
  std::vector<std::size_t> first(rows), count(rows);
  for (std::size_t r = 0, at = 0; r < rows; ++r) {
    first[r] = at;
    count[r] = base + (r < extra ? 1 : 0);
    at += count[r];
  }
  const std::size_t n_batches = base + (extra ? 1 : 0);
  for (std::size_t b = 0; b < n_batches; ++b) {
    Batch batch;
    for (std::size_t r = 0; r < rows; ++r) {
      if (b < count[r]) batch.rows.push_back(make_row(first[r] + b, r));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace pialm
