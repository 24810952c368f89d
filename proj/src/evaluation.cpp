#include "pral/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "pral/ops.hpp"

namespace pral {

template <typename T>
PerplexityResult perplexity_detail(const RoleAlternatingModel<T>& m, std::span<const TokenizedDialog> corpus,
                                   Side side) {
  PerplexityResult res;
  for (const auto& td : corpus) {
    const PredictionLayout layout = PredictionLayout::of(td);
    if (layout.rows() == 0) continue;
    const std::span<const TokenId> context(td.ids.data(), td.ids.size() - 1);
    for (Role role : {Role::User, Role::System}) {
      if ((side == Side::User && role != Role::User) || (side == Side::System && role != Role::System)) continue;
      const auto mask = layout.mask<T>(role);
      if (std::find(mask.begin(), mask.end(), T(1)) == mask.end()) continue;
      const auto ce = cross_entropy(m.lm(role).logits(context, 0), layout.targets, std::span<const T>(mask));
      for (std::size_t r = 0; r < ce.size(); ++r) {
        if (mask[r] == T(0)) continue;
        res.nll_sum += static_cast<double>(ce[r]);
        ++res.token_count;
      }
    }
  }
  if (res.token_count == 0) throw Error("perplexity: no predicted tokens for the selected side");
  res.perplexity = std::exp(res.nll_sum / static_cast<double>(res.token_count));
  return res;
}

template <typename T>
double perplexity(const RoleAlternatingModel<T>& m, std::span<const TokenizedDialog> corpus, Side side) {
  return perplexity_detail(m, corpus, side).perplexity;
}

template <typename T>
PerplexityResult lm_perplexity(const TransformerLM<T>& lm, std::span<const TokenizedDialog> corpus) {
  PerplexityResult res;
  for (const auto& td : corpus) {
    if (td.ids.size() < 2) continue;
    const std::span<const TokenId> context(td.ids.data(), td.ids.size() - 1);
    const std::span<const TokenId> targets(td.ids.data() + 1, td.ids.size() - 1);
    const std::vector<T> mask(targets.size(), T(1));
    for (T ce : cross_entropy(lm.logits(context, 0), targets, std::span<const T>(mask))) {
      res.nll_sum += static_cast<double>(ce);
      ++res.token_count;
    }
  }
  if (res.token_count == 0) throw Error("perplexity: no predicted tokens");
  res.perplexity = std::exp(res.nll_sum / static_cast<double>(res.token_count));
  return res;
}

// ---------------------------------------------------------------------------

std::vector<std::string> bleu_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references, int n) {
  if (hypotheses.size() != references.size()) {
    throw Error("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " + std::to_string(references.size()) +
                " references");
  }
  if (n < 1 || n > 4) throw Error("bleu: n must lie in 1..4, got " + std::to_string(n));
  BleuStats s;
  s.matches.assign(static_cast<std::size_t>(n), 0);
  s.totals.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto h = bleu_tokens(hypotheses[i]);
    const auto r = bleu_tokens(references[i]);
    s.hyp_len += h.size();
    s.ref_len += r.size();
    for (std::size_t k = 1; k <= static_cast<std::size_t>(n); ++k) {
      std::map<std::vector<std::string>, std::size_t> hc, rc;
      for (std::size_t j = 0; j + k <= h.size(); ++j) ++hc[{h.begin() + j, h.begin() + j + k}];
      for (std::size_t j = 0; j + k <= r.size(); ++j) ++rc[{r.begin() + j, r.begin() + j + k}];
      for (const auto& [gram, c] : hc) {
        s.totals[k - 1] += c;
        auto it = rc.find(gram);
        if (it != rc.end()) s.matches[k - 1] += std::min(c, it->second);
      }
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_len == 0 || s.matches.empty() || s.matches[0] == 0) return 0.0;
  double log_sum = 0;
  for (std::size_t k = 0; k < s.matches.size(); ++k) {
    double p;
    if (s.matches[k] == 0) p = 1.0 / static_cast<double>(s.totals[k] + 1);
    else p = static_cast<double>(s.matches[k]) / static_cast<double>(s.totals[k]);
    log_sum += std::log(p);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)));
  return bp * std::exp(log_sum / static_cast<double>(s.matches.size()));
}

double bleu(std::span<const std::string> hypotheses, std::span<const std::string> references, int n) {
  return bleu_from_stats(bleu_stats(hypotheses, references, n));
}

// ---------------------------------------------------------------------------

namespace {

bool contains_tokens(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

bool contains_value(std::string_view haystack, std::string_view needle) {
  return contains_tokens(bleu_tokens(haystack), bleu_tokens(needle));
}

SuccessScore success_f1(std::span<const std::vector<std::string>> generated, std::span<const SlotMap> gold_slots) {
  if (generated.size() != gold_slots.size()) {
    throw Error("success_f1: " + std::to_string(generated.size()) + " outputs but " +
                std::to_string(gold_slots.size()) + " gold slot maps");
  }
  using Tokens = std::vector<std::string>;
  std::set<Tokens> inventory;
  for (const auto& slots : gold_slots) {
    for (const auto& [name, value] : slots) {
      auto t = bleu_tokens(value);
      if (t.empty()) throw Error("success_f1: slot '" + name + "' has an empty value");
      inventory.insert(std::move(t));
    }
  }
  if (inventory.empty()) throw Error("success_f1: no gold slot values in the corpus");

  SuccessScore s;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    std::vector<Tokens> turns;
    for (const auto& g : generated[i]) turns.push_back(bleu_tokens(g));
    auto found = [&](const Tokens& v) {
      return std::any_of(turns.begin(), turns.end(), [&](const Tokens& t) { return contains_tokens(t, v); });
    };
    std::set<Tokens> gold;
    for (const auto& [name, value] : gold_slots[i]) gold.insert(bleu_tokens(value));
    s.gold += gold.size();
    for (const auto& v : gold) s.matched += found(v) ? 1 : 0;
    for (const auto& v : inventory) s.predicted += found(v) ? 1 : 0;
  }
  s.precision = s.predicted > 0 ? static_cast<double>(s.matched) / static_cast<double>(s.predicted) : 0.0;
  s.recall = s.gold > 0 ? static_cast<double>(s.matched) / static_cast<double>(s.gold) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["perplexity"] = perplexity;
  j["perplexity_user"] = perplexity_user;
  j["perplexity_system"] = perplexity_system;
  j["bleu"] = nlohmann::json::object();
  for (const auto& [n, v] : bleu) j["bleu"][std::to_string(n)] = v;
  if (success_f1) {
    j["success_f1"] = {{"precision", success_f1->precision},
                       {"recall", success_f1->recall},
                       {"f1", success_f1->f1},
                       {"matched", success_f1->matched},
                       {"predicted", success_f1->predicted},
                       {"gold", success_f1->gold}};
  } else {
    j["success_f1"] = nullptr;
  }
  j["counts"] = {{"dialogs", dialogs}, {"turns", turns}, {"predicted_tokens", predicted_tokens}};
  return j;
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  auto line = [&](const std::string& k, double v) { os << std::left << std::setw(20) << k << v << '\n'; };
  line("perplexity", perplexity);
  line("perplexity (user)", perplexity_user);
  line("perplexity (system)", perplexity_system);
  for (const auto& [n, v] : bleu) line("BLEU-" + std::to_string(n), v);
  if (success_f1) {
    line("success precision", success_f1->precision);
    line("success recall", success_f1->recall);
    line("success F1", success_f1->f1);
  }
  os << std::left << std::setw(20) << "dialogs" << dialogs << '\n';
  os << std::left << std::setw(20) << "system turns" << turns << '\n';
  os << std::left << std::setw(20) << "predicted tokens" << predicted_tokens << '\n';
  return os.str();
}

template <typename T>
EvalOutput evaluate(const RoleAlternatingModel<T>& m, const Vocab& v, std::span<const Dialog> corpus,
                    const EvalConfig& cfg) {
  const std::size_t n = cfg.max_dialogs > 0 ? std::min(cfg.max_dialogs, corpus.size()) : corpus.size();
  if (n == 0) throw Error("evaluate: empty corpus");
  const auto dialogs = corpus.first(n);

  std::vector<TokenizedDialog> tds;
  for (const auto& d : dialogs) tds.push_back(encode_dialog(v, d));
  EvalOutput out;
  MetricsReport& r = out.report;
  const auto both = perplexity_detail(m, tds, Side::Both);
  r.perplexity = both.perplexity;
  r.predicted_tokens = both.token_count;
  r.perplexity_user = perplexity(m, tds, Side::User);
  r.perplexity_system = perplexity(m, tds, Side::System);
  r.dialogs = n;

  std::vector<std::string> hyps, refs;
  std::vector<SlotMap> gold;
  bool any_slots = false;
  Rng rng(derive_seed(cfg.decode.seed, "evaluate"));
  for (const auto& d : dialogs) {
    std::vector<std::string> turns;
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
      if (d.utterances[i].role != Role::System) continue;
      Dialog history{d.id, {d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(i)}, {}};
      const Utterance u = generate_utterance(m, v, history, Role::System, cfg.decode, &rng);
      hyps.push_back(u.text);
      refs.push_back(d.utterances[i].text);
      turns.push_back(u.text);
    }
    r.turns += turns.size();
    out.generated.push_back(std::move(turns));
    gold.push_back(d.slots);
    any_slots = any_slots || !d.slots.empty();
  }
  for (int k : {1, 2, 4}) r.bleu[k] = bleu(hyps, refs, k);
  if (any_slots) r.success_f1 = success_f1(out.generated, gold);
  return out;
}

#define PRAL_INSTANTIATE_EVAL(T)                                                                                     \
  template PerplexityResult perplexity_detail(const RoleAlternatingModel<T>&, std::span<const TokenizedDialog>,     \
                                              Side);                                                                 \
  template double perplexity(const RoleAlternatingModel<T>&, std::span<const TokenizedDialog>, Side);              \
  template PerplexityResult lm_perplexity(const TransformerLM<T>&, std::span<const TokenizedDialog>);               \
  template EvalOutput evaluate(const RoleAlternatingModel<T>&, const Vocab&, std::span<const Dialog>,              \
                               const EvalConfig&);

PRAL_INSTANTIATE_EVAL(float)
PRAL_INSTANTIATE_EVAL(double)

}  // namespace pral
