#include "pral/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>

namespace pral {

namespace {

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

constexpr std::string_view kHeader = "pral-bpe v1";

}  // namespace

std::vector<std::pair<std::string_view, bool>> pre_split(std::string_view s) {
  std::vector<std::pair<std::string_view, bool>> out;
  std::size_t chunk_start = 0;
  auto flush = [&](std::size_t end) {
    if (end > chunk_start) out.emplace_back(s.substr(chunk_start, end - chunk_start), false);
  };
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '\n') {
      flush(i);
      out.emplace_back(s.substr(i, 1), true);
      chunk_start = ++i;
    } else if ((s[i] == 'A' || s[i] == 'B') && i + 1 < s.size() && s[i + 1] == ':') {
      flush(i);
      out.emplace_back(s.substr(i, 2), true);
      i += 2;
      chunk_start = i;
    } else if (s[i] == ' ' && i > chunk_start) {
      flush(i);
      chunk_start = i++;
    } else {
      ++i;
    }
  }
  flush(s.size());
  return out;
}

Vocab::Vocab(std::vector<Merge> merges) : merges_(std::move(merges)) {
  tokens_.reserve(kBaseSize + merges_.size());
  for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  tokens_.emplace_back("A:");
  tokens_.emplace_back("B:");
  for (std::size_t id = 0; id < tokens_.size(); ++id) token_to_id_.emplace(tokens_[id], static_cast<TokenId>(id));
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto [a, b] = merges_[r];
    const auto limit = static_cast<TokenId>(tokens_.size());
    if (a < 0 || b < 0 || a >= limit || b >= limit) throw FormatError("merge " + std::to_string(r) + " refers to an unknown id");
    if (a == kNewline || b == kNewline || a == kUserPrefix || a == kSystemPrefix || b == kUserPrefix ||
        b == kSystemPrefix) {
      throw FormatError("merge " + std::to_string(r) + " involves an atomic token");
    }
    if (!merge_rank_.emplace(pair_key(a, b), r).second) throw FormatError("duplicate merge at rank " + std::to_string(r));
    // A merge whose bytes already name a token reuses that id.
    std::string merged = tokens_[static_cast<std::size_t>(a)] + tokens_[static_cast<std::size_t>(b)];
    auto [it, fresh] = token_to_id_.emplace(merged, static_cast<TokenId>(tokens_.size()));
    if (fresh) tokens_.push_back(std::move(merged));
    merge_result_.push_back(it->second);
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw IndexError("unknown token id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

void Vocab::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> sym;
  sym.reserve(chunk.size());
  for (char c : chunk) sym.push_back(static_cast<unsigned char>(c));
  while (sym.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const auto [a, b] = merges_[best_rank];
    const TokenId merged = merge_result_[best_rank];
    std::size_t w = 0;
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
        sym[w++] = merged;
        ++i;
      } else {
        sym[w++] = sym[i];
      }
    }
    sym.resize(w);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<TokenId> Vocab::encode(std::string_view s) const {
  std::vector<TokenId> out;
  for (const auto& [piece, atomic] : pre_split(s)) {
    if (atomic) {
      out.push_back(piece == "A:" ? kUserPrefix : piece == "B:" ? kSystemPrefix : kNewline);
    } else {
      encode_chunk(piece, out);
    }
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token(id);
  return out;
}

std::string Vocab::serialize() const {
  std::ostringstream os;
  os << kHeader << '\n'
     << "base-alphabet bytes\n"
     << "reserved A: B:\n"
     << "atomic 10\n"
     << "merges " << merges_.size() << '\n';
  for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
  return os.str();
}

Vocab Vocab::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  auto expect = [&](std::string_view want) {
    if (!std::getline(is, line) || line != want) {
      throw FormatError("vocab file: expected '" + std::string(want) + "', got '" + line + "'");
    }
  };
  expect(kHeader);
  expect("base-alphabet bytes");
  expect("reserved A: B:");
  expect("atomic 10");
  if (!std::getline(is, line) || line.rfind("merges ", 0) != 0) throw FormatError("vocab file: missing merge count");
  const std::size_t count = std::stoul(line.substr(7));
  std::vector<Merge> merges;
  merges.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw FormatError("vocab file: expected " + std::to_string(count) + " merges");
    std::istringstream ls(line);
    TokenId a, b;
    if (!(ls >> a >> b)) throw FormatError("vocab file: bad merge line " + std::to_string(i + 1));
    merges.emplace_back(a, b);
  }
  if (std::getline(is, line) && !line.empty()) throw FormatError("vocab file: trailing content");
  return Vocab(std::move(merges));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write vocab " + path.string());
  f << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open vocab " + path.string());
  return parse(std::string(std::istreambuf_iterator<char>(f), {}));
}

Vocab train_bpe(std::span<const std::string> texts, std::size_t vocab_size) {
  if (vocab_size < Vocab::kBaseSize + 1) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below the base alphabet size + 1 (" +
                      std::to_string(Vocab::kBaseSize + 1) + ")");
  }
  if (texts.empty()) throw Error("train_bpe: empty corpus");

  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (const auto& [piece, atomic] : pre_split(t)) {
      if (!atomic && piece.size() > 1) ++counts[std::string(piece)];
    }
  }
  struct Word {
    std::vector<TokenId> sym;
    std::size_t freq;
  };
  std::vector<Word> words;
  words.reserve(counts.size());
  for (const auto& [w, f] : counts) {
    Word word{{}, f};
    for (char c : w) word.sym.push_back(static_cast<unsigned char>(c));
    words.push_back(std::move(word));
  }

  std::vector<std::string> token_bytes;
  for (int b = 0; b < 256; ++b) token_bytes.emplace_back(1, static_cast<char>(b));
  token_bytes.emplace_back("A:");
  token_bytes.emplace_back("B:");

  std::unordered_map<std::string, TokenId> known;
  for (std::size_t id = 0; id < token_bytes.size(); ++id) known.emplace(token_bytes[id], static_cast<TokenId>(id));

  std::vector<Vocab::Merge> merges;
  std::unordered_map<std::uint64_t, std::size_t> pair_counts;
  while (token_bytes.size() < vocab_size) {
    pair_counts.clear();
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) pair_counts[pair_key(w.sym[i], w.sym[i + 1])] += w.freq;
    }
    if (pair_counts.empty()) break;
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, c] : pair_counts) {
      if (c < best_count) continue;
      if (c == best_count) {
        const auto ba = static_cast<std::size_t>(best >> 32), bb = static_cast<std::size_t>(best & 0xffffffffu);
        const auto ka = static_cast<std::size_t>(key >> 32), kb = static_cast<std::size_t>(key & 0xffffffffu);
        if (std::tie(token_bytes[ka], token_bytes[kb]) >= std::tie(token_bytes[ba], token_bytes[bb])) continue;
      }
      best = key;
      best_count = c;
    }
    const auto a = static_cast<TokenId>(best >> 32);
    const auto b = static_cast<TokenId>(best & 0xffffffffu);
    merges.emplace_back(a, b);
    std::string bytes = token_bytes[static_cast<std::size_t>(a)] + token_bytes[static_cast<std::size_t>(b)];
    auto [known_it, fresh] = known.emplace(bytes, static_cast<TokenId>(token_bytes.size()));
    if (fresh) token_bytes.push_back(std::move(bytes));
    const TokenId merged = known_it->second;
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == a && w.sym[i + 1] == b) {
          w.sym[out++] = merged;
          ++i;
        } else {
          w.sym[out++] = w.sym[i];
        }
      }
      w.sym.resize(out);
    }
  }
  return Vocab(std::move(merges));
}

Vocab train_bpe(std::span<const Dialog> corpus, std::size_t vocab_size) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& d : corpus) texts.push_back(serialize_unified(d));
  return train_bpe(std::span<const std::string>(texts), vocab_size);
}

TokenizedDialog encode_dialog(const Vocab& v, const Dialog& d) {
  validate_dialog(d);
  TokenizedDialog td;
  for (std::size_t u = 0; u < d.utterances.size(); ++u) {
    const auto& utt = d.utterances[u];
    std::string segment(role_prefix(utt.role));
    segment += ' ';
    segment += utt.text;
    segment += kUtteranceSuffix;
    const std::size_t start = td.ids.size();
    const auto seg_ids = v.encode(segment);
    td.ids.insert(td.ids.end(), seg_ids.begin(), seg_ids.end());
    td.spans.push_back({start, td.ids.size(), utt.role, u + 1});
  }
  return td;
}

TokenSplitter vocab_splitter(const Vocab& v) {
  return [&v](std::string_view text) {
    std::vector<std::string> out;
    for (TokenId id : v.encode(text)) out.push_back(v.token(id));
    return out;
  };
}

}  // namespace pral
