// Shared fixtures and independent reference implementations for tests.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pral/autograd.hpp"
#include "pral/model.hpp"
#include "pral/rng.hpp"
#include "pral/tokenizer.hpp"

namespace pral::testing {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = scale * standard_normal(rng);
  return t;
}

inline ModelConfig tiny_config(Rng& rng, std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 1 + uniform_index(rng, 2);
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_positions = 24;
  c.dropout_rate = 0.0;
  c.init_seed = rng();
  return c;
}

// Replaces every parameter with N(0, scale^2) noise (gains around 1) so
// checks do not sit in the near-linear regime of the 0.02 init.
template <typename T>
void scramble(TransformerLM<T>& lm, Rng& rng, double scale = 0.3) {
  for (const auto& p : lm.parameters()) {
    const bool gain = p->name.find("gain") != std::string::npos;
    for (auto& v : p->value.values()) v = static_cast<T>((gain ? 1.0 : 0.0) + scale * standard_normal(rng));
  }
}

// Alternating spans of 1..max_span tokens with ids in [0, vocab).
inline TokenizedDialog random_tokenized(Rng& rng, std::size_t vocab, std::size_t max_utts, std::size_t max_span,
                                        std::size_t max_len) {
  TokenizedDialog td;
  Role role = uniform_index(rng, 2) == 0 ? Role::User : Role::System;
  const std::size_t U = 1 + uniform_index(rng, max_utts);
  for (std::size_t u = 1; u <= U; ++u) {
    const std::size_t len = 1 + uniform_index(rng, max_span);
    if (td.ids.size() + len > max_len) break;
    const std::size_t start = td.ids.size();
    for (std::size_t k = 0; k < len; ++k) td.ids.push_back(static_cast<TokenId>(uniform_index(rng, vocab)));
    td.spans.push_back({start, td.ids.size(), role, u});
    role = other_role(role);
  }
  if (td.spans.empty()) {
    td.ids = {static_cast<TokenId>(uniform_index(rng, vocab))};
    td.spans.push_back({0, 1, role, 1});
  }
  return td;
}

// Central finite differences of a scalar function of `inputs`, compared
// with the taped gradient on up to `max_coords` random coordinates.
template <typename F>
double gradcheck(const std::vector<Var<double>>& inputs, F f, Rng& rng, std::size_t max_coords,
                 double h = 1e-5, double floor = 1e-6) {
  for (const auto& in : inputs) in->zero_grad();
  {
    Tape<double> tape;
    auto out = f(tape);
    tape.backward(out);
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i]->value.size(); ++k) coords.emplace_back(i, k);
  }
  for (std::size_t i = coords.size(); i > 1; --i) std::swap(coords[i - 1], coords[uniform_index(rng, i)]);
  if (coords.size() > max_coords) coords.resize(max_coords);
  double worst = 0;
  for (const auto& [i, k] : coords) {
    const double analytic = inputs[i]->has_grad() ? inputs[i]->grad[k] : 0.0;
    double& x = inputs[i]->value[k];
    const double saved = x;
    x = saved + h;
    Tape<double> tp(false);
    const double fp = f(tp)->value.item();
    x = saved - h;
    Tape<double> tm(false);
    const double fm = f(tm)->value.item();
    x = saved;
    worst = std::max(worst, rel_error(analytic, (fp - fm) / (2 * h), floor));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Oracles

inline long double oracle_ce(std::span<const double> row, TokenId target) {
  long double mx = row[0];
  for (double v : row) mx = std::max<long double>(mx, v);
  long double z = 0;
  for (double v : row) z += std::exp(static_cast<long double>(v) - mx);
  return mx + std::log(z) - static_cast<long double>(row[static_cast<std::size_t>(target)]);
}

struct Eq2Oracle {
  double raw = 0;
  double weight_count = 0;
  double normalized = 0;
};

// Straight double loop over utterances u and positions inside span u; the
// predicting model is the one of span u's role, row t - 1 predicts token t.
inline Eq2Oracle eq2_oracle(const Tensor<double>& user_logits, const Tensor<double>& system_logits,
                            const TokenizedDialog& td, double gamma) {
  Eq2Oracle o;
  long double raw = 0, count = 0;
  const std::size_t U = td.spans.size();
  for (std::size_t u = 1; u <= U; ++u) {
    long double w = 1;
    for (std::size_t k = 0; k < U - u; ++k) w *= gamma;
    const auto& span = td.spans[u - 1];
    const Tensor<double>& L = span.role == Role::User ? user_logits : system_logits;
    for (std::size_t t = std::max<std::size_t>(span.start, 1); t < span.end; ++t) {
      raw += w * oracle_ce(L.row(t - 1), td.ids[t]);
      count += w;
    }
  }
  o.raw = static_cast<double>(raw);
  o.weight_count = static_cast<double>(count);
  o.normalized = count > 0 ? static_cast<double>(raw / count) : 0.0;
  return o;
}

// Lowercased whitespace tokens, written independently of bleu_tokens.
inline std::vector<std::string> oracle_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + " ") {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

struct BleuOracle {
  std::vector<std::size_t> matches, totals;
  std::size_t hyp_len = 0, ref_len = 0;
  double value = 0;
};

// Brute-force k-gram counting by pairwise position comparison.
inline BleuOracle bleu_oracle(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int n) {
  BleuOracle o;
  o.matches.assign(static_cast<std::size_t>(n), 0);
  o.totals.assign(static_cast<std::size_t>(n), 0);
  auto same = [](const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b, std::size_t j,
                 std::size_t k) {
    for (std::size_t q = 0; q < k; ++q) {
      if (a[i + q] != b[j + q]) return false;
    }
    return true;
  };
  for (std::size_t d = 0; d < hyps.size(); ++d) {
    const auto h = oracle_words(hyps[d]);
    const auto r = oracle_words(refs[d]);
    o.hyp_len += h.size();
    o.ref_len += r.size();
    for (std::size_t k = 1; k <= static_cast<std::size_t>(n); ++k) {
      if (h.size() < k) continue;
      o.totals[k - 1] += h.size() - k + 1;
      for (std::size_t i = 0; i + k <= h.size(); ++i) {
        // Count each distinct k-gram once at its first occurrence.
        bool first = true;
        for (std::size_t j = 0; j < i && first; ++j) first = !same(h, j, h, i, k);
        if (!first) continue;
        std::size_t in_h = 0, in_r = 0;
        for (std::size_t j = 0; j + k <= h.size(); ++j) in_h += same(h, j, h, i, k);
        for (std::size_t j = 0; j + k <= r.size(); ++j) in_r += same(r, j, h, i, k);
        o.matches[k - 1] += std::min(in_h, in_r);
      }
    }
  }
  if (o.hyp_len == 0 || o.matches[0] == 0) return o;
  double log_p = 0;
  for (std::size_t k = 0; k < o.matches.size(); ++k) {
    const double num = o.matches[k] == 0 ? 1.0 : static_cast<double>(o.matches[k]);
    const double den = o.matches[k] == 0 ? static_cast<double>(o.totals[k] + 1) : static_cast<double>(o.totals[k]);
    log_p += std::log(num / den);
  }
  const double ratio = static_cast<double>(o.ref_len) / static_cast<double>(o.hyp_len);
  const double bp = ratio > 1 ? std::exp(1 - ratio) : 1.0;
  o.value = bp * std::exp(log_p / n);
  return o;
}

// Space-padded substring search over normalized text.
inline bool oracle_contains(const std::string& hay, const std::string& needle) {
  auto norm = [](const std::string& s) {
    std::string out = " ";
    for (const auto& w : oracle_words(s)) out += w + " ";
    return out;
  };
  const std::string n = norm(needle);
  return n.size() > 1 && norm(hay).find(n) != std::string::npos;
}

}  // namespace pral::testing
