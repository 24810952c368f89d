#include "pral/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace pral {

using nlohmann::json;

std::string_view role_prefix(Role r) { return r == Role::User ? "A:" : "B:"; }
std::string_view role_name(Role r) { return r == Role::User ? "user" : "system"; }

namespace {

// Returns the byte offset of the first problem in `text`, or npos. Fills
// `why` with a short reason.
std::size_t find_text_problem(std::string_view text, std::string* why) {
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x20 || c == 0x7f) {
      *why = "control character";
      return i;
    }
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len;
    std::uint32_t cp;
    if ((c & 0xe0) == 0xc0) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      len = 4;
      cp = c & 0x07;
    } else {
      *why = "invalid UTF-8";
      return i;
    }
    if (i + len > text.size()) {
      *why = "truncated UTF-8 sequence";
      return i;
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xc0) != 0x80) {
        *why = "invalid UTF-8";
        return i;
      }
      cp = (cp << 6) | (cc & 0x3f);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
      *why = "invalid UTF-8";
      return i;
    }
    if (cp >= 0x80 && cp <= 0x9f) {
      *why = "control character";
      return i;
    }
    i += len;
  }
  if (text.find_first_not_of(' ') == std::string_view::npos) {
    *why = "empty utterance text";
    return 0;
  }
  return std::string_view::npos;
}

std::string sanitize_text(std::string_view text) {
  std::string out(text);
  for (char& ch : out) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x20 || c == 0x7f) ch = ' ';
  }
  const auto b = out.find_first_not_of(' ');
  if (b == std::string::npos) return {};
  const auto e = out.find_last_not_of(' ');
  return out.substr(b, e - b + 1);
}

}  // namespace

void validate_utterance_text(std::string_view text) {
  std::string why;
  const std::size_t at = find_text_problem(text, &why);
  if (at != std::string_view::npos) throw FormatError(why + " at byte " + std::to_string(at) + " of utterance");
}

std::string repair_utterance_text(std::string_view text) {
  std::string out(text);
  std::string why;
  for (;;) {
    const std::size_t at = find_text_problem(out, &why);
    if (at == std::string_view::npos) break;
    if (why == "empty utterance text") return {};
    out[at] = ' ';
  }
  return sanitize_text(out);
}

void validate_dialog(const Dialog& d) {
  if (d.utterances.empty()) throw FormatError("dialog '" + d.id + "' has no utterances");
  for (std::size_t i = 0; i < d.utterances.size(); ++i) {
    validate_utterance_text(d.utterances[i].text);
    if (i > 0 && d.utterances[i].role == d.utterances[i - 1].role) {
      throw FormatError("dialog '" + d.id + "': roles must alternate at utterance " + std::to_string(i));
    }
  }
}

std::string serialize_unified(const Dialog& d) {
  validate_dialog(d);
  std::string out;
  for (const auto& u : d.utterances) {
    out += role_prefix(u.role);
    out += ' ';
    out += u.text;
    out += kUtteranceSuffix;
  }
  return out;
}

Dialog parse_unified(std::string_view s) {
  if (s.empty()) throw ParseError("empty dialog", 0);
  Dialog d;
  std::size_t pos = 0;
  while (pos < s.size()) {
    Role role;
    if (s.compare(pos, 2, "A:") == 0) {
      role = Role::User;
    } else if (s.compare(pos, 2, "B:") == 0) {
      role = Role::System;
    } else if (pos + 1 < s.size() && s[pos + 1] == ':') {
      throw ParseError("unknown role prefix '" + std::string(s.substr(pos, 2)) + "'", pos);
    } else {
      throw ParseError("missing role prefix", pos);
    }
    if (pos + 2 >= s.size() || s[pos + 2] != ' ') throw ParseError("expected space after role prefix", pos + 2);
    const std::size_t text_begin = pos + 3;
    const std::size_t nl = s.find('\n', text_begin);
    if (nl == std::string_view::npos) throw ParseError("dangling content after last suffix", pos);
    if (s.compare(nl, kUtteranceSuffix.size(), kUtteranceSuffix) != 0) {
      throw ParseError("malformed utterance suffix", nl);
    }
    const std::string_view text = s.substr(text_begin, nl - text_begin);
    std::string why;
    const std::size_t bad = find_text_problem(text, &why);
    if (bad != std::string_view::npos) throw ParseError(why, text_begin + bad);
    if (!d.utterances.empty() && d.utterances.back().role == role) {
      throw ParseError("roles must alternate", pos);
    }
    d.utterances.push_back({role, std::string(text)});
    pos = nl + kUtteranceSuffix.size();
  }
  return d;
}

// ---------------------------------------------------------------------------

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && !(text[j] == ' ' || text[j] == '\t' || text[j] == '\n' || text[j] == '\r')) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

CorpusStats corpus_stats(std::span<const Dialog> corpus, const TokenSplitter& split) {
  if (corpus.empty()) throw Error("corpus_stats: empty corpus");
  std::size_t turns = 0;
  std::size_t tokens = 0;
  std::unordered_set<std::string> vocab;
  for (const auto& d : corpus) {
    turns += d.utterances.size();
    for (const auto& u : d.utterances) {
      auto toks = split(u.text);
      tokens += toks.size();
      for (auto& t : toks) vocab.insert(std::move(t));
    }
  }
  CorpusStats s;
  s.dialog_count = corpus.size();
  s.avg_turns_per_dialog = static_cast<double>(turns) / static_cast<double>(corpus.size());
  s.avg_tokens_per_turn = turns == 0 ? 0.0 : static_cast<double>(tokens) / static_cast<double>(turns);
  s.avg_tokens_per_dialog = static_cast<double>(tokens) / static_cast<double>(corpus.size());
  s.unique_token_count = vocab.size();
  return s;
}

// ---------------------------------------------------------------------------

IngestResult ingest_tabular(std::span<const TabularRecord> records,
                            const std::map<std::string, Role>& role_mapping) {
  std::set<std::string> unmapped;
  for (const auto& r : records) {
    if (!role_mapping.count(r.speaker)) unmapped.insert(r.speaker);
  }
  if (!unmapped.empty()) {
    std::string labels;
    for (const auto& l : unmapped) labels += (labels.empty() ? "" : ", ") + ("'" + l + "'");
    throw IngestError("unmapped speaker label(s): " + labels);
  }

  std::vector<std::string> order;
  std::map<std::string, std::vector<const TabularRecord*>> groups;
  for (const auto& r : records) {
    auto& g = groups[r.dialog_id];
    if (g.empty()) order.push_back(r.dialog_id);
    g.push_back(&r);
  }

  IngestResult result;
  for (const auto& id : order) {
    auto& g = groups[id];
    std::stable_sort(g.begin(), g.end(),
                     [](const TabularRecord* a, const TabularRecord* b) { return a->turn_index < b->turn_index; });
    Dialog d;
    d.id = id;
    for (const TabularRecord* r : g) {
      std::string text = sanitize_text(r->text);
      if (text.empty()) continue;
      const Role role = role_mapping.at(r->speaker);
      if (!d.utterances.empty() && d.utterances.back().role == role) {
        d.utterances.back().text += ' ';
        d.utterances.back().text += text;
      } else {
        d.utterances.push_back({role, std::move(text)});
      }
    }
    try {
      validate_dialog(d);
    } catch (const FormatError&) {
      ++result.dropped;
      continue;
    }
    result.dialogs.push_back(std::move(d));
  }
  return result;
}

// ---------------------------------------------------------------------------

std::string corpus_line(const Dialog& d) {
  json j;
  j["id"] = d.id;
  j["text"] = serialize_unified(d);
  if (!d.slots.empty()) j["slots"] = d.slots;
  return j.dump();
}

Dialog parse_corpus_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), e.byte == 0 ? 0 : e.byte - 1);
  }
  if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
    throw ParseError("record needs a string field 'text'", 0);
  }
  Dialog d = parse_unified(j["text"].get<std::string>());
  if (j.contains("id")) {
    if (!j["id"].is_string()) throw ParseError("field 'id' must be a string", 0);
    d.id = j["id"].get<std::string>();
  }
  if (j.contains("slots") && !j["slots"].is_null()) {
    if (!j["slots"].is_object()) throw ParseError("field 'slots' must be an object", 0);
    for (const auto& [k, v] : j["slots"].items()) {
      if (!v.is_string() || v.get<std::string>().empty()) {
        throw ParseError("slot '" + k + "' must be a nonempty string", 0);
      }
      d.slots[k] = v.get<std::string>();
    }
  }
  return d;
}

void write_corpus(const std::filesystem::path& path, std::span<const Dialog> corpus) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write corpus " + path.string());
  for (const auto& d : corpus) f << corpus_line(d) << '\n';
  if (!f) throw Error("short write to " + path.string());
}

std::vector<Dialog> read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open corpus " + path.string());
  const std::string data(std::istreambuf_iterator<char>(f), {});
  std::vector<Dialog> out;
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < data.size()) {
    std::size_t end = data.find('\n', start);
    if (end == std::string::npos) end = data.size();
    ++line_no;
    const std::string_view line(data.data() + start, end - start);
    if (line.find_first_not_of(" \r\t") != std::string_view::npos) {
      try {
        out.push_back(parse_corpus_line(line));
      } catch (const ParseError& e) {
        throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what(), start + e.offset());
      } catch (const FormatError& e) {
        throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what(), start);
      }
    }
    start = end + 1;
  }
  return out;
}

}  // namespace pral
