#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pral/error.hpp"

namespace pral {

enum class Role { User, System };

inline Role other_role(Role r) { return r == Role::User ? Role::System : Role::User; }
// "A:" for User, "B:" for System.
std::string_view role_prefix(Role r);
std::string_view role_name(Role r);

inline constexpr std::string_view kUtteranceSuffix = "\n\n\n";

struct Utterance {
  Role role = Role::User;
  std::string text;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

using SlotMap = std::map<std::string, std::string>;

struct Dialog {
  std::string id;
  std::vector<Utterance> utterances;
  SlotMap slots;  // gold slot values for Success F1; may be empty

  friend bool operator==(const Dialog&, const Dialog&) = default;
};

// Throws FormatError unless `text` is valid UTF-8 without control characters
// and is nonempty after trimming spaces.
void validate_utterance_text(std::string_view text);
// Replaces control characters and bytes of invalid UTF-8 with spaces and
// trims; returns "" when nothing usable is left.
std::string repair_utterance_text(std::string_view text);
// Text checks plus length >= 1 and strict role alternation.
void validate_dialog(const Dialog& d);

// "<prefix> <text>\n\n\n" per utterance.
std::string serialize_unified(const Dialog& d);
// Inverse of serialize_unified; id and slots are left empty. Throws
// ParseError carrying the byte offset of the problem.
Dialog parse_unified(std::string_view s);

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t dialog_count = 0;
  double avg_turns_per_dialog = 0;
  double avg_tokens_per_turn = 0;
  double avg_tokens_per_dialog = 0;
  std::size_t unique_token_count = 0;
};

using TokenSplitter = std::function<std::vector<std::string>(std::string_view)>;

std::vector<std::string> whitespace_tokens(std::string_view text);

// Turns are utterances; tokens are counted over utterance text only.
CorpusStats corpus_stats(std::span<const Dialog> corpus, const TokenSplitter& split = whitespace_tokens);

// ---------------------------------------------------------------------------
// Ingestion

struct TabularRecord {
  std::string dialog_id;
  std::int64_t turn_index = 0;
  std::string speaker;
  std::string text;
};

struct IngestResult {
  std::vector<Dialog> dialogs;
  std::size_t dropped = 0;
};

// Groups records by dialog id (first-appearance order), orders each group by
// turn index, and merges consecutive same-role turns with one space. Control
// characters in text become spaces. Dialogs left empty or invalid are
// dropped and counted. Throws IngestError listing every unmapped label.
IngestResult ingest_tabular(std::span<const TabularRecord> records,
                            const std::map<std::string, Role>& role_mapping);

// ---------------------------------------------------------------------------
// Corpus file: one JSON object per line, {"id", "text", "slots"}.

std::string corpus_line(const Dialog& d);
Dialog parse_corpus_line(std::string_view line);
void write_corpus(const std::filesystem::path& path, std::span<const Dialog> corpus);
// Throws ParseError whose offset is the byte position in the file.
std::vector<Dialog> read_corpus(const std::filesystem::path& path);

}  // namespace pral
