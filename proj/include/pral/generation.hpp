#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pral/model.hpp"
#include "pral/tokenizer.hpp"

namespace pral {

enum class DecodeStrategy { Greedy, TopP };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::TopP;
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

// Ids of the smallest probability-sorted prefix whose mass reaches top_p.
// Ties in probability are ordered by id.
std::vector<TokenId> nucleus(std::span<const double> probs, double top_p);

// Argmax with ties to the lowest id.
TokenId greedy_token(std::span<const double> logits);

// Draws from softmax(logits / temperature) restricted to the nucleus.
TokenId sample_top_p(std::span<const double> logits, double temperature, double top_p, Rng& rng);

// Keeps the most recent utterances whose encoding plus `reserve` tokens fits
// `capacity`; drops whole utterances from the front. Throws CapacityError if
// even the last utterance alone does not fit.
Dialog truncate_history(const Vocab& v, const Dialog& history, std::size_t reserve, std::size_t capacity);

// Generates the next utterance for `role` conditioned on `history`, at
// position offset 0. Starts from the forced role-prefix token and stops at
// the first newline token, a role-prefix token, or max_new_tokens. The
// result is valid utterance text; an empty generation becomes "...".
// Throws TurnOrderError if the history already ends with `role`.
template <typename T>
Utterance generate_utterance(const RoleAlternatingModel<T>& m, const Vocab& v, const Dialog& history, Role role,
                             const DecodeConfig& cfg, Rng* rng = nullptr);

// A human plays one role and the model plays the other.
template <typename T>
class ChatSession {
 public:
  ChatSession(const RoleAlternatingModel<T>& m, const Vocab& v, Role human_role, DecodeConfig cfg);

  const Dialog& history() const { return history_; }
  Role human_role() const { return human_role_; }
  // User opens an empty dialog; afterwards roles alternate.
  Role next_speaker() const;

  // Appends the human utterance and the model's reply. Throws
  // TurnOrderError when it is not the human's turn and FormatError for
  // unusable text.
  Utterance chat_step(const std::string& human_text);
  // Lets the model speak when it holds the turn (e.g. it opens the dialog).
  Utterance model_turn();

 private:
  const RoleAlternatingModel<T>& model_;
  const Vocab& vocab_;
  Role human_role_;
  DecodeConfig cfg_;
  Rng rng_;
  Dialog history_;
};

}  // namespace pral
