#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pral/generation.hpp"

namespace pral {

enum class Side { User, System, Both };

struct PerplexityResult {
  double perplexity = 0;
  double nll_sum = 0;
  std::size_t token_count = 0;
};

// Unweighted next-token NLL of the selected role(s) at offset 0. Throws
// Error when no token is predicted.
template <typename T>
PerplexityResult perplexity_detail(const RoleAlternatingModel<T>& m, std::span<const TokenizedDialog> corpus, Side side);
template <typename T>
double perplexity(const RoleAlternatingModel<T>& m, std::span<const TokenizedDialog> corpus, Side side);

// Every predicted token of a single LM, e.g. the teacher.
template <typename T>
PerplexityResult lm_perplexity(const TransformerLM<T>& lm, std::span<const TokenizedDialog> corpus);

// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> bleu_tokens(std::string_view s);

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped k-gram matches, k = 1..n
  std::vector<std::size_t> totals;   // hypothesis k-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references, int n);
double bleu_from_stats(const BleuStats& s);
// Corpus BLEU-n with a brevity penalty; a k > 1 precision with zero matches
// becomes 1 / (total + 1). Throws Error on a length mismatch or n outside 1..4.
double bleu(std::span<const std::string> hypotheses, std::span<const std::string> references, int n);

struct SuccessScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t matched = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

// True when the token sequence of `needle` occurs contiguously in `haystack`
// (both via bleu_tokens).
bool contains_value(std::string_view haystack, std::string_view needle);

// `generated[i]` holds the system turns produced for dialog i. Slot values
// are counted once per dialog; a value is provided when it occurs inside any
// one turn. Predicted mentions are inventory values (all gold values in the
// corpus) found in the output. Throws Error if there is no gold value.
SuccessScore success_f1(std::span<const std::vector<std::string>> generated, std::span<const SlotMap> gold_slots);

struct EvalConfig {
  DecodeConfig decode{DecodeStrategy::Greedy};
  std::size_t max_dialogs = 0;  // 0 evaluates every dialog
};

struct MetricsReport {
  double perplexity = 0;
  double perplexity_user = 0;
  double perplexity_system = 0;
  std::map<int, double> bleu;  // n = 1, 2, 4
  std::optional<SuccessScore> success_f1;  // absent without slot annotations
  std::size_t dialogs = 0;
  std::size_t turns = 0;
  std::size_t predicted_tokens = 0;

  nlohmann::json to_json() const;
  std::string table() const;
};

struct EvalOutput {
  MetricsReport report;
  std::vector<std::vector<std::string>> generated;  // system turns per dialog
};

// Regenerates every system turn from its gold history and scores it.
template <typename T>
EvalOutput evaluate(const RoleAlternatingModel<T>& m, const Vocab& v, std::span<const Dialog> corpus,
                    const EvalConfig& cfg = {});

}  // namespace pral
