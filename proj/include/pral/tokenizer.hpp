#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pral/corpus.hpp"
#include "pral/tensor.hpp"

namespace pral {

// Byte-level BPE vocabulary. Ids 0..255 are raw bytes, 256 and 257 are the
// atomic role prefixes "A:" and "B:", merges follow in rank order (a merge
// whose bytes already exist reuses that token). Merges
// never cross a role prefix or a newline, so "\n\n\n" always encodes as
// three newline tokens.
class Vocab {
 public:
  static constexpr TokenId kUserPrefix = 256;
  static constexpr TokenId kSystemPrefix = 257;
  static constexpr TokenId kNewline = '\n';
  static constexpr std::size_t kBaseSize = 258;

  using Merge = std::pair<TokenId, TokenId>;

  Vocab() : Vocab(std::vector<Merge>{}) {}
  explicit Vocab(std::vector<Merge> merges);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> id_of(const std::string& token) const;

  std::vector<TokenId> encode(std::string_view s) const;
  // Throws IndexError on an unknown id.
  std::string decode(std::span<const TokenId> ids) const;

  // Text form: header lines, then one "left right" id pair per merge.
  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.merges_ == b.merges_; }

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
  std::vector<TokenId> merge_result_;  // id produced by each merge
};

// Splits text into merge units: role prefixes and newlines stand alone, the
// rest breaks before every space (" word" style chunks). Returned flags mark
// atomic pieces.
std::vector<std::pair<std::string_view, bool>> pre_split(std::string_view s);

// Deterministic for a fixed text order. Frequency ties go to the pair whose
// (left bytes, right bytes) is lexicographically smallest. Throws
// ConfigError if vocab_size < kBaseSize + 1 and Error on an empty corpus.
Vocab train_bpe(std::span<const std::string> texts, std::size_t vocab_size);
Vocab train_bpe(std::span<const Dialog> corpus, std::size_t vocab_size);

struct UtteranceSpan {
  std::size_t start = 0;  // first token
  std::size_t end = 0;    // one past the last token
  Role role = Role::User;
  std::size_t index = 0;  // 1-based utterance number u

  std::size_t length() const { return end - start; }
  friend bool operator==(const UtteranceSpan&, const UtteranceSpan&) = default;
};

struct TokenizedDialog {
  std::vector<TokenId> ids;
  std::vector<UtteranceSpan> spans;

  std::size_t utterance_count() const { return spans.size(); }
};

TokenizedDialog encode_dialog(const Vocab& v, const Dialog& d);

// Splitter over vocabulary tokens, for corpus_stats in trained-vocab mode.
TokenSplitter vocab_splitter(const Vocab& v);

}  // namespace pral
