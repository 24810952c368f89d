#include "pral/generation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pral {

void DecodeConfig::validate() const {
  if (strategy == DecodeStrategy::Greedy) {
    if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be >= 1");
    return;
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1], got " + std::to_string(top_p));
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be >= 1");
}

std::vector<TokenId> nucleus(std::span<const double> probs, double top_p) {
  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  double mass = 0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[static_cast<std::size_t>(order[keep++])];
    if (mass >= top_p) break;
  }
  order.resize(std::max<std::size_t>(keep, 1));
  return order;
}

TokenId greedy_token(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("greedy_token on empty logits");
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenId sample_top_p(std::span<const double> logits, double temperature, double top_p, Rng& rng) {
  if (logits.empty()) throw DimensionError("sample_top_p on empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((logits[i] - mx) / temperature);
  for (double& x : p) x /= z;
  const auto keep = nucleus(p, top_p);
  double mass = 0;
  for (TokenId id : keep) mass += p[static_cast<std::size_t>(id)];
  const double r = uniform_unit(rng) * mass;
  double acc = 0;
  for (TokenId id : keep) {
    acc += p[static_cast<std::size_t>(id)];
    if (r < acc) return id;
  }
  return keep.back();
}

Dialog truncate_history(const Vocab& v, const Dialog& history, std::size_t reserve, std::size_t capacity) {
  if (history.utterances.empty()) {
    if (reserve > capacity) {
      throw CapacityError("generation budget of " + std::to_string(reserve) + " tokens exceeds " +
                          std::to_string(capacity) + " positions");
    }
    return history;
  }
  const TokenizedDialog td = encode_dialog(v, history);
  std::size_t first = 0;
  while (td.ids.size() - td.spans[first].start + reserve > capacity) {
    if (first + 1 == td.spans.size()) {
      throw CapacityError("most recent utterance (" + std::to_string(td.spans[first].length()) + " tokens) plus " +
                          std::to_string(reserve) + " reserved tokens exceeds " + std::to_string(capacity) +
                          " positions");
    }
    ++first;
  }
  Dialog out = history;
  out.utterances.erase(out.utterances.begin(), out.utterances.begin() + static_cast<std::ptrdiff_t>(first));
  return out;
}

template <typename T>
Utterance generate_utterance(const RoleAlternatingModel<T>& m, const Vocab& v, const Dialog& history, Role role,
                             const DecodeConfig& cfg, Rng* rng) {
  cfg.validate();
  if (!history.utterances.empty() && history.utterances.back().role == role) {
    throw TurnOrderError(std::string("history already ends with a ") + std::string(role_name(role)) + " utterance");
  }
  const TransformerLM<T>& lm = m.lm(role);
  const std::size_t cap = lm.config().max_positions;
  const Dialog kept = truncate_history(v, history, cfg.max_new_tokens + 1, cap);

  std::vector<TokenId> ids;
  if (!kept.utterances.empty()) ids = encode_dialog(v, kept).ids;
  ids.push_back(role == Role::User ? Vocab::kUserPrefix : Vocab::kSystemPrefix);

  Rng local(cfg.seed);
  Rng& draw = rng ? *rng : local;
  std::vector<TokenId> out;
  std::vector<double> row(lm.config().vocab_size);
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const Tensor<T> logits = lm.logits(ids, 0);
    const auto last = logits.row(logits.rows() - 1);
    std::copy(last.begin(), last.end(), row.begin());
    const TokenId next = cfg.strategy == DecodeStrategy::Greedy ? greedy_token(row)
                                                                : sample_top_p(row, cfg.temperature, cfg.top_p, draw);
    if (next == Vocab::kNewline || next == Vocab::kUserPrefix || next == Vocab::kSystemPrefix) break;
    out.push_back(next);
    ids.push_back(next);
  }
  std::string text = repair_utterance_text(v.decode(out));
  if (text.empty()) text = "...";
  return {role, std::move(text)};
}

// ---------------------------------------------------------------------------

template <typename T>
ChatSession<T>::ChatSession(const RoleAlternatingModel<T>& m, const Vocab& v, Role human_role, DecodeConfig cfg)
    : model_(m), vocab_(v), human_role_(human_role), cfg_(cfg), rng_(derive_seed(cfg.seed, "chat")) {
  cfg_.validate();
}

template <typename T>
Role ChatSession<T>::next_speaker() const {
  return history_.utterances.empty() ? Role::User : other_role(history_.utterances.back().role);
}

template <typename T>
Utterance ChatSession<T>::chat_step(const std::string& human_text) {
  if (next_speaker() != human_role_) {
    throw TurnOrderError(std::string("it is the ") + std::string(role_name(next_speaker())) + " model's turn");
  }
  validate_utterance_text(human_text);
  history_.utterances.push_back({human_role_, human_text});
  return model_turn();
}

template <typename T>
Utterance ChatSession<T>::model_turn() {
  const Role r = other_role(human_role_);
  if (next_speaker() != r) throw TurnOrderError("it is the human's turn");
  Utterance reply = generate_utterance(model_, vocab_, history_, r, cfg_, &rng_);
  history_.utterances.push_back(reply);
  return reply;
}

template Utterance generate_utterance(const RoleAlternatingModel<float>&, const Vocab&, const Dialog&, Role,
                                      const DecodeConfig&, Rng*);
template Utterance generate_utterance(const RoleAlternatingModel<double>&, const Vocab&, const Dialog&, Role,
                                      const DecodeConfig&, Rng*);
template class ChatSession<float>;
template class ChatSession<double>;

}  // namespace pral
