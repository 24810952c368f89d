// Acceptance suite: `acceptance <criterion>` prints one PASS/FAIL line and
// exits nonzero on FAIL.
#include <algorithm>
#include <map>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "pral/evaluation.hpp"
#include "pral/ops.hpp"
#include "pral/synthetic.hpp"
#include "pral/training.hpp"
#include "support.hpp"

using namespace pral;
using namespace pral::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> parts;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    parts.push_back(what + (ok ? "" : " [FAILED]"));
  }
  std::string str() const {
    std::string s;
    for (const auto& p : parts) s += (s.empty() ? "" : "; ") + p;
    return s;
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::vector<TokenizedDialog> encode_fitting(const Vocab& v, std::span<const Dialog> corpus, std::size_t cap) {
  std::vector<TokenizedDialog> out;
  for (const auto& d : corpus) {
    auto td = encode_dialog(v, d);
    if (td.ids.size() <= cap) out.push_back(std::move(td));
  }
  return out;
}

std::vector<Dialog> fitting_dialogs(const Vocab& v, std::span<const Dialog> corpus, std::size_t cap) {
  std::vector<Dialog> out;
  for (const auto& d : corpus) {
    if (encode_dialog(v, d).ids.size() <= cap) out.push_back(d);
  }
  return out;
}

// sum(x .* w) for a constant w; a test-local op so every library op can be
// reduced to a scalar through a random projection.
Var<double> dot_const(Tape<double>& tape, const Var<double>& x, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x->value[i] * w[i];
  Var<double> xin = x;
  return tape.record(Tensor<double>::scalar(s), tape.needs_grad({&x}), [xin, w](Node<double>& out) {
    auto& g = xin->grad_buffer();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += out.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

constexpr double kGradTol = 1e-4;
constexpr double kGradFloor = 1e-6;
constexpr double kGradStep = 1e-5;
constexpr int kGradTrials = 100;
constexpr double kGradBudgetSeconds = 120;

void criterion_1(Outcome& out) {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::map<std::string, double> worst;
  auto check = [&](const std::string& op, const std::vector<Var<double>>& inputs, auto f, std::size_t coords = 64) {
    worst[op] = std::max(worst[op], gradcheck(inputs, f, rng, coords, kGradStep, kGradFloor));
  };

  for (int trial = 0; trial < kGradTrials; ++trial) {
    const std::size_t r = 1 + uniform_index(rng, 4), k = 1 + uniform_index(rng, 4), c = 1 + uniform_index(rng, 4);
    auto a = make_parameter("a", random_tensor(rng, {r, k}));
    auto a2 = make_parameter("a2", random_tensor(rng, {r, k}));
    auto b = make_parameter("b", random_tensor(rng, {k, c}));
    auto bt = make_parameter("bt", random_tensor(rng, {c, k}));
    auto bias = make_parameter("bias", random_tensor(rng, {k}));
    auto gain = make_parameter("gain", random_tensor(rng, {k}));
    const auto w_rk = random_tensor(rng, {r, k});
    const auto w_rc = random_tensor(rng, {r, c});
    const auto w_rr = random_tensor(rng, {r, r});

    check("matmul", {a, b}, [&](Tape<double>& t) { return dot_const(t, matmul(t, a, b), w_rc); });
    check("matmul_transposed", {a, bt}, [&](Tape<double>& t) { return dot_const(t, matmul_transposed(t, a, bt), w_rc); });
    check("add", {a, a2}, [&](Tape<double>& t) { return dot_const(t, add(t, a, a2), w_rk); });
    check("add_bias", {a, bias}, [&](Tape<double>& t) { return dot_const(t, add_bias(t, a, bias), w_rk); });
    const double f = standard_normal(rng);
    check("scale", {a}, [&](Tape<double>& t) { return dot_const(t, scale(t, a, f), w_rk); });
    check("sum", {a}, [&](Tape<double>& t) { return sum(t, a); });
    check("gelu", {a}, [&](Tape<double>& t) { return dot_const(t, gelu(t, a), w_rk); });
    if (k > 1) {
      check("layer_norm", {a, gain, bias},
            [&](Tape<double>& t) { return dot_const(t, layer_norm(t, a, gain, bias), w_rk); });
    }
    check("softmax_rows", {a}, [&](Tape<double>& t) { return dot_const(t, softmax_rows(t, a), w_rk); });
    const std::uint64_t drop_seed = rng();
    check("dropout", {a}, [&](Tape<double>& t) {
      Rng dr(drop_seed);
      return dot_const(t, dropout(t, a, 0.3, dr), w_rk);
    });

    const std::size_t V = 2 + uniform_index(rng, 5);
    auto table = make_parameter("table", random_tensor(rng, {V, k}));
    std::vector<TokenId> ids(r);
    for (auto& id : ids) id = static_cast<TokenId>(uniform_index(rng, V));
    check("embedding", {table}, [&](Tape<double>& t) { return dot_const(t, embedding(t, table, ids), w_rk); });

    const std::size_t heads = 1 + uniform_index(rng, 2), d = heads * (1 + uniform_index(rng, 3));
    auto q = make_parameter("q", random_tensor(rng, {r, d}));
    auto kk = make_parameter("k", random_tensor(rng, {r, d}));
    auto v = make_parameter("v", random_tensor(rng, {r, d}));
    const auto w_rd = random_tensor(rng, {r, d});
    check("causal_self_attention", {q, kk, v},
          [&](Tape<double>& t) { return dot_const(t, causal_self_attention(t, q, kk, v, heads), w_rd); });

    auto logits = make_parameter("logits", random_tensor(rng, {r, V}, 2.0));
    auto logits2 = make_parameter("logits2", random_tensor(rng, {r, V}, 2.0));
    std::vector<TokenId> targets(r);
    std::vector<double> weights(r);
    for (std::size_t i = 0; i < r; ++i) {
      targets[i] = static_cast<TokenId>(uniform_index(rng, V));
      weights[i] = uniform_index(rng, 4) == 0 ? 0.0 : uniform_unit(rng) + 0.1;
    }
    check("weighted_cross_entropy", {logits}, [&](Tape<double>& t) {
      return weighted_cross_entropy(t, logits, targets, std::span<const double>(weights));
    });
    check("weighted_kl_rows", {logits, logits2}, [&](Tape<double>& t) {
      return weighted_kl_rows(t, logits, logits2, std::span<const double>(weights));
    });
    (void)w_rr;

    // Full objective: both role models, discounted LM loss plus teacher KL.
    const std::size_t vocab = 3 + uniform_index(rng, 6);
    const ModelConfig cfg = tiny_config(rng, vocab);
    RoleAlternatingModel<double> m(cfg);
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    TransformerLM<double> tlm(tiny_config(rng, vocab), "teacher.");
    scramble(tlm, rng);
    const TeacherHandle<double> teacher(tlm);
    const TokenizedDialog td = random_tokenized(rng, vocab, 4, 4, cfg.max_positions);
    const Offsets off{uniform_index(rng, cfg.max_positions - td.ids.size() + 1),
                      uniform_index(rng, cfg.max_positions - td.ids.size() + 1)};
    ObjectiveSpec spec;
    spec.gamma = 0.5 + 0.5 * uniform_unit(rng);
    const double alpha = uniform_unit(rng);
    spec.kl_direction = uniform_index(rng, 2) == 0 ? KlDirection::StudentTeacher : KlDirection::TeacherStudent;
    {
      Tape<double> probe(false);
      const auto o = dialog_objective(probe, m, td, off, &teacher, spec);
      spec.lm_scale = o.weight_total > 0 ? 1.0 / o.weight_total : 0.0;
      spec.kl_scale = o.kl_rows > 0 ? alpha / static_cast<double>(o.kl_rows) : 0.0;
    }
    std::vector<Var<double>> params = m.user_lm.parameters();
    params.insert(params.end(), m.system_lm.parameters().begin(), m.system_lm.parameters().end());
    check("total_loss", params, [&](Tape<double>& t) { return dialog_objective(t, m, td, off, &teacher, spec).value; },
          24);
  }
  const double secs = seconds_since(t0);
  double overall = 0;
  std::string worst_op;
  for (const auto& [op, e] : worst) {
    if (e >= overall) {
      overall = e;
      worst_op = op;
    }
  }
  for (const auto& [op, e] : worst) {
    if (e >= kGradTol) out.check(false, op + " rel err " + fmt(e));
  }
  out.check(overall < kGradTol, std::to_string(worst.size()) + " ops x " + std::to_string(kGradTrials) +
                                    " trials, max rel err " + fmt(overall) + " (" + worst_op + ") < " + fmt(kGradTol));
  out.check(secs < kGradBudgetSeconds, "runtime " + fmt(secs) + "s < " + fmt(kGradBudgetSeconds) + "s");
}

// ---------------------------------------------------------------------------
// 2. Eq. (2) fidelity

constexpr double kEq2Tol = 1e-9;

void criterion_2(Outcome& out) {
  Rng rng(202);
  double worst_norm = 0, worst_raw = 0;
  bool weights_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t vocab = 3 + uniform_index(rng, 8);
    const ModelConfig cfg = tiny_config(rng, vocab);
    RoleAlternatingModel<double> m(cfg);
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    const TokenizedDialog td = random_tokenized(rng, vocab, 6, 4, cfg.max_positions);
    const Offsets off{uniform_index(rng, cfg.max_positions - td.ids.size() + 1),
                      uniform_index(rng, cfg.max_positions - td.ids.size() + 1)};
    const double gamma = 0.3 + 0.7 * uniform_unit(rng);
    const LossBreakdown lb = lm_loss(m, td, off, gamma);
    const auto oracle =
        eq2_oracle(m.user_lm.logits(td.ids, off.user), m.system_lm.logits(td.ids, off.system), td, gamma);
    worst_norm = std::max(worst_norm, rel_error(lb.lm_loss, oracle.normalized, 1e-300));
    worst_raw = std::max(worst_raw, rel_error(lb.lm_loss_raw, oracle.raw, 1e-300));
    const std::size_t U = td.spans.size();
    for (const auto& pu : lb.per_utterance) weights_exact &= pu.weight == std::pow(gamma, static_cast<double>(U - pu.u));
  }
  out.check(worst_norm < kEq2Tol, "50 dialogs, normalized max rel err " + fmt(worst_norm) + " < " + fmt(kEq2Tol));
  out.check(worst_raw < kEq2Tol, "unnormalized max rel err " + fmt(worst_raw) + " < " + fmt(kEq2Tol));
  out.check(weights_exact, "per-utterance weights equal gamma^(U-u)");
}

// ---------------------------------------------------------------------------
// 3. Discount degeneracy

void criterion_3(Outcome& out) {
  const auto w = discount_weights(3, 0.95);
  out.check(w.size() == 3 && w[0] == 0.9025 && w[1] == 0.95 && w[2] == 1.0,
            "U=3 gamma=0.95 weights [" + fmt(w[0], 17) + ", " + fmt(w[1], 17) + ", " + fmt(w[2], 17) + "]");
  Rng rng(303);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t vocab = 3 + uniform_index(rng, 8);
    const ModelConfig cfg = tiny_config(rng, vocab);
    RoleAlternatingModel<double> m(cfg);
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    const TokenizedDialog td = random_tokenized(rng, vocab, 6, 4, cfg.max_positions);
    const auto lu = m.user_lm.logits(td.ids, 0), ls = m.system_lm.logits(td.ids, 0);
    // Plain masked mean CE over every predicted token.
    long double s = 0;
    std::size_t n = 0;
    for (const auto& span : td.spans) {
      for (std::size_t t = std::max<std::size_t>(span.start, 1); t < span.end; ++t) {
        s += oracle_ce((span.role == Role::User ? lu : ls).row(t - 1), td.ids[t]);
        ++n;
      }
    }
    const double mean = n ? static_cast<double>(s / n) : 0.0;
    worst = std::max(worst, std::abs(lm_loss(m, td, {}, 1.0).lm_loss - mean));
  }
  out.check(worst < 1e-9, "gamma=1 vs unweighted masked mean CE, max abs diff " + fmt(worst) + " < 1e-9");
}

// ---------------------------------------------------------------------------
// 4. SPR contract

void criterion_4(Outcome& out) {
  PositionSampler s(1024, derive_seed(4, "acceptance.spr"));
  std::vector<std::size_t> counts(25, 0);
  bool in_range = true;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    const std::size_t o = s.sample(1000);
    if (o > 24) in_range = false;
    else ++counts[o];
  }
  const double p = 1.0 / 25, mean = kDraws * p, sigma = std::sqrt(kDraws * p * (1 - p));
  double worst_z = 0;
  for (auto c : counts) worst_z = std::max(worst_z, std::abs(static_cast<double>(c) - mean) / sigma);
  out.check(in_range, "10000 draws (max=1024, L=1000) all in {0..24}");
  out.check(worst_z < 4.0, "max per-bin deviation " + fmt(worst_z) + " sigma < 4");
  PositionSampler full(256, 9);
  bool zero = true;
  for (int i = 0; i < 1000; ++i) zero &= full.sample(256) == 0;
  out.check(zero, "L=max forces offset 0");
}

// ---------------------------------------------------------------------------
// 5. Distillation sanity

constexpr double kPureKlBudgetSeconds = 180;

double mean_kl(const RoleAlternatingModel<float>& m, const TeacherHandle<float>& teacher,
               std::span<const TokenizedDialog> tds) {
  double sum = 0;
  std::size_t rows = 0;
  for (const auto& td : tds) {
    const auto layout = PredictionLayout::of(td);
    for (Role role : {Role::User, Role::System}) {
      std::vector<float> mask(td.ids.size(), 0.0f);
      std::size_t n = 0;
      for (std::size_t r = 0; r < layout.rows(); ++r) {
        if (layout.role[r] == role) {
          mask[r] = 1.0f;
          ++n;
        }
      }
      if (n == 0) continue;
      sum += distill_loss(m.lm(role).logits(td.ids, 0), teacher, td.ids, 0, std::span<const float>(mask)) *
             static_cast<double>(n);
      rows += n;
    }
  }
  return sum / static_cast<double>(rows);
}

void criterion_5(Outcome& out) {
  const auto t0 = Clock::now();
  // Frozen copy of the student as its own teacher.
  Rng rng(505);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t vocab = 3 + uniform_index(rng, 8);
    RoleAlternatingModel<double> m(tiny_config(rng, vocab));
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    const TokenizedDialog td = random_tokenized(rng, vocab, 5, 4, m.config().max_positions);
    for (Role role : {Role::User, Role::System}) {
      const TeacherHandle<double> copy(m.lm(role));
      std::vector<double> mask(td.ids.size(), 1.0);
      mask.back() = 0.0;
      const std::size_t off = uniform_index(rng, m.config().max_positions - td.ids.size() + 1);
      worst = std::max(worst, distill_loss(m.lm(role).logits(td.ids, off), copy, td.ids, off,
                                           std::span<const double>(mask)));
    }
  }
  out.check(worst < 1e-9, "teacher = frozen student KL " + fmt(worst) + " < 1e-9");

  const double a0 = alpha_at(0, 0.1, 0.9999), a1 = alpha_at(10000, 0.1, 0.9999);
  const double closed = 0.1 * std::exp(10000.0 * std::log(0.9999));
  out.check(a0 == 0.1, "alpha(0) = " + fmt(a0, 10));
  out.check(std::abs(a1 - 0.0368) <= 1e-4 && std::abs(a1 - closed) < 1e-12,
            "alpha(10000) = " + fmt(a1, 6) + " (closed form " + fmt(closed, 6) + ")");

  // Pure-KL training toward a briefly trained teacher.
  const auto dialogs = generate_synthetic(derive_seed(5, "acceptance.kl.corpus"), 200);
  const Vocab v = train_bpe(std::span<const Dialog>(dialogs), 400);
  ModelConfig sc;
  sc.n_layers = 2;
  sc.n_heads = 2;
  sc.d_model = 32;
  sc.d_ff = 64;
  sc.vocab_size = v.size();
  sc.max_positions = 160;
  sc.dropout_rate = 0.0;
  sc.init_seed = 51;
  const auto tds = encode_fitting(v, dialogs, sc.max_positions);
  TransformerLM<float> tlm(teacher_config(sc), "teacher.");
  TrainConfig tc;
  tc.total_steps = 150;
  tc.learning_rate = 3e-3;
  tc.spr_enabled = false;
  tc.seed = 52;
  train_language_model<float>(tds, tlm, tc);
  const TeacherHandle<float> teacher(tlm);

  RoleAlternatingModel<float> student(sc);
  const std::span<const TokenizedDialog> probe(tds.data(), std::min<std::size_t>(tds.size(), 40));
  const double before = mean_kl(student, teacher, probe);
  TrainConfig kc;
  kc.total_steps = 200;
  kc.learning_rate = 1e-3;
  kc.lm_enabled = false;
  kc.spr_enabled = false;
  kc.seed = 53;
  train<float>(tds, student, &teacher, kc);
  const double after = mean_kl(student, teacher, probe);
  const double cut = 1.0 - after / before;
  out.check(cut > 0.5, "pure-KL 200 steps: mean KL " + fmt(before) + " -> " + fmt(after) + " (" + fmt(100 * cut, 3) +
                           "% reduction > 50%)");
  const double secs = seconds_since(t0);
  out.check(secs < kPureKlBudgetSeconds, "runtime " + fmt(secs) + "s < " + fmt(kPureKlBudgetSeconds) + "s");
}

// ---------------------------------------------------------------------------
// 6. Role isolation and factorization

bool all_zero_grads(const TransformerLM<double>& lm) {
  for (const auto& p : lm.parameters()) {
    if (!p->has_grad()) continue;
    for (double g : p->grad.values()) {
      if (g != 0.0) return false;
    }
  }
  return true;
}

bool some_nonzero_grad(const TransformerLM<double>& lm) { return !all_zero_grads(lm); }

void criterion_6(Outcome& out) {
  Rng rng(606);
  bool isolated = true, reached = true;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t vocab = 3 + uniform_index(rng, 6);
    RoleAlternatingModel<double> m(tiny_config(rng, vocab));
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    TokenizedDialog td;
    do {
      td = random_tokenized(rng, vocab, 5, 4, m.config().max_positions);
    } while (td.spans.size() < 2 || td.spans[0].length() < 2);
    const auto layout = PredictionLayout::of(td);
    for (Role role : {Role::User, Role::System}) {
      m.zero_grad();
      Tape<double> tape;
      const auto dl = dialog_logits(tape, m, td, 0, 0);
      std::vector<TokenId> targets(td.ids.size(), 0);
      std::copy(layout.targets.begin(), layout.targets.end(), targets.begin());
      std::vector<double> w(td.ids.size(), 0.0);
      for (std::size_t r = 0; r < layout.rows(); ++r) w[r] = layout.role[r] == role ? 1.0 : 0.0;
      const auto loss = weighted_cross_entropy(tape, role == Role::User ? dl.user : dl.system, targets,
                                               std::span<const double>(w));
      tape.backward(loss);
      isolated &= all_zero_grads(m.lm(other_role(role)));
      reached &= some_nonzero_grad(m.lm(role));
    }
  }
  out.check(isolated, "20 dialogs: masked loss of one role leaves the other model's gradients exactly zero");
  out.check(reached, "own-role gradients nonzero");

  // p(d) summed over every continuation of a fixed role layout must be 1,
  // and each term must equal the product of prefix-only conditionals.
  constexpr std::size_t V = 5;
  RoleAlternatingModel<double> m(tiny_config(rng, V));
  scramble(m.user_lm, rng, 0.6);
  scramble(m.system_lm, rng, 0.6);
  const std::vector<UtteranceSpan> spans = {{0, 2, Role::User, 1}, {2, 4, Role::System, 2}, {4, 5, Role::User, 3}};
  double total = 0, worst = 0;
  const std::size_t combos = V * V * V * V;
  for (std::size_t code = 0; code < combos; ++code) {
    TokenizedDialog td;
    td.ids = {1};
    std::size_t c = code;
    for (int i = 0; i < 4; ++i, c /= V) td.ids.push_back(static_cast<TokenId>(c % V));
    td.spans = spans;
    double logp = 0;
    for (std::size_t t = 1; t < td.ids.size(); ++t) {
      const Role r = t < 2 ? Role::User : t < 4 ? Role::System : Role::User;
      const std::vector<TokenId> prefix(td.ids.begin(), td.ids.begin() + static_cast<std::ptrdiff_t>(t));
      const auto lg = m.lm(r).logits(prefix, 0);
      logp -= static_cast<double>(oracle_ce(lg.row(t - 1), td.ids[t]));
    }
    total += std::exp(logp);
    worst = std::max(worst, rel_error(-lm_loss(m, td, {}, 1.0).lm_loss_raw, logp, 1e-300));
  }
  out.check(std::abs(total - 1.0) < 1e-9, "vocab 5: sum of p(d) over " + std::to_string(combos) +
                                              " dialogs = " + fmt(total, 15));
  out.check(worst < 1e-9, "log p(d) from the factorized loss matches prefix-only conditionals, rel err " + fmt(worst));
}

// ---------------------------------------------------------------------------
// 7. Overfit run

constexpr double kOverfitBudgetSeconds = 300;

void criterion_7(Outcome& out) {
  const auto t0 = Clock::now();
  const auto dialogs = generate_synthetic(1, 10);
  const auto vocab_corpus = generate_synthetic(derive_seed(1, "acceptance.overfit.vocab"), 500);
  const Vocab v = train_bpe(std::span<const Dialog>(vocab_corpus), 1000);
  ModelConfig mc;
  mc.vocab_size = v.size();
  mc.init_seed = 1;
  std::vector<TokenizedDialog> tds;
  for (const auto& d : dialogs) tds.push_back(encode_dialog(v, d));
  RoleAlternatingModel<float> m(mc);
  TrainConfig tc;
  tc.total_steps = 500;
  tc.learning_rate = 1e-3;
  tc.teacher_enabled = false;
  tc.seed = 1;
  train<float>(tds, m, nullptr, tc);

  double raw = 0, weight = 0;
  for (const auto& td : tds) {
    const auto lb = lm_loss(m, td, {}, tc.gamma);
    raw += lb.lm_loss_raw;
    weight += lb.weight_total;
  }
  const double loss = raw / weight;
  const auto eval = evaluate(m, v, std::span<const Dialog>(dialogs));
  const double secs = seconds_since(t0);
  out.check(loss < 0.4, "normalized lm_loss " + fmt(loss) + " < 0.4");
  out.check(eval.report.perplexity < 1.5, "self-perplexity " + fmt(eval.report.perplexity) + " < 1.5");
  out.check(eval.report.bleu.at(4) > 0.9, "greedy BLEU-4 " + fmt(eval.report.bleu.at(4)) + " > 0.9");
  out.check(secs < kOverfitBudgetSeconds, "runtime " + fmt(secs) + "s < " + fmt(kOverfitBudgetSeconds) + "s");
}

// ---------------------------------------------------------------------------
// 9. Metrics oracles

void criterion_9(Outcome& out) {
  Rng rng(909);
  const std::vector<std::string> words = {"the", "The", "cat", "sat", "on", "mat", "a", "dog"};
  auto sentence = [&](std::size_t max_len) {
    std::string s;
    const std::size_t n = uniform_index(rng, max_len + 1);
    for (std::size_t i = 0; i < n; ++i) s += (i ? (uniform_index(rng, 5) == 0 ? "  " : " ") : "") + words[uniform_index(rng, words.size())];
    return s;
  };
  bool exact = true;
  double worst = 0;
  for (int c = 0; c < 19; ++c) {
    const std::size_t n_sent = 1 + uniform_index(rng, 3);
    std::vector<std::string> hyps, refs;
    for (std::size_t i = 0; i < n_sent; ++i) {
      hyps.push_back(sentence(8));
      refs.push_back(uniform_index(rng, 3) == 0 ? hyps.back() : sentence(8));
    }
    const int n = 1 + static_cast<int>(uniform_index(rng, 4));
    const BleuStats s = bleu_stats(hyps, refs, n);
    const BleuOracle o = bleu_oracle(hyps, refs, n);
    exact &= s.matches == o.matches && s.totals == o.totals && s.hyp_len == o.hyp_len && s.ref_len == o.ref_len;
    worst = std::max(worst, std::abs(bleu(hyps, refs, n) - o.value));
  }
  const std::vector<std::string> h = {"the cat"}, r = {"the cat sat"};
  const double bp = bleu(h, r, 1);
  const BleuOracle bo = bleu_oracle(h, r, 1);
  exact &= bleu_stats(h, r, 1).matches == bo.matches;
  worst = std::max(worst, std::abs(bp - bo.value));
  out.check(exact, "20 cases: k-gram counts equal the brute-force oracle exactly");
  out.check(worst < 1e-12, "BLEU values match oracle, max diff " + fmt(worst));
  out.check(std::abs(bp - 0.6065) <= 1e-4, "BP case 'the cat' vs 'the cat sat' = " + fmt(bp, 6));

  const std::vector<std::vector<std::string>> gen = {{"the phone number is 01223 555123 ."}};
  const std::vector<SlotMap> gold = {{{"phone", "01223 555123"}, {"address", "12 mill road"}}};
  const auto sf = success_f1(gen, gold);
  out.check(sf.precision == 1.0 && sf.recall == 0.5 && std::abs(sf.f1 - 2.0 / 3.0) < 1e-15,
            "Success hand case P=" + fmt(sf.precision) + " R=" + fmt(sf.recall) + " F1=" + fmt(sf.f1, 6));

  ModelConfig uc;
  uc.n_layers = 1;
  uc.n_heads = 2;
  uc.d_model = 8;
  uc.d_ff = 16;
  uc.vocab_size = 50;
  uc.max_positions = 32;
  RoleAlternatingModel<double> um(uc);
  // Zero token embeddings make the tied output projection emit zeros.
  for (auto* lm : {&um.user_lm, &um.system_lm}) lm->parameter(lm->name_prefix() + "tok_emb")->value.fill(0.0);
  std::vector<TokenizedDialog> tds;
  for (int i = 0; i < 5; ++i) tds.push_back(random_tokenized(rng, 50, 4, 5, 32));
  const double ppl = perplexity(um, std::span<const TokenizedDialog>(tds), Side::Both);
  out.check(std::abs(ppl - 50.0) <= 1e-6, "uniform-logit perplexity over vocab 50 = " + fmt(ppl, 12));
}

// ---------------------------------------------------------------------------
// 10. Round-trips and determinism

std::string random_utf8_text(Rng& rng, bool allow_newlines) {
  std::string s;
  const std::size_t n = 1 + uniform_index(rng, 24);
  auto put = [&](std::uint32_t cp) {
    if (cp < 0x80) {
      s += static_cast<char>(cp);
    } else if (cp < 0x800) {
      s += static_cast<char>(0xc0 | (cp >> 6));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    } else if (cp < 0x10000) {
      s += static_cast<char>(0xe0 | (cp >> 12));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
      s += static_cast<char>(0xf0 | (cp >> 18));
      s += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    switch (uniform_index(rng, allow_newlines ? 6 : 5)) {
      case 0: put(' '); break;
      case 1: put(static_cast<std::uint32_t>(0x21 + uniform_index(rng, 0x5e))); break;
      case 2: put(static_cast<std::uint32_t>(0xa0 + uniform_index(rng, 0x60))); break;
      case 3: put(static_cast<std::uint32_t>(0x4e00 + uniform_index(rng, 0x200))); break;
      case 4: put(static_cast<std::uint32_t>(0x1f600 + uniform_index(rng, 0x50))); break;
      default: s += uniform_index(rng, 2) ? "\n" : (uniform_index(rng, 2) ? "A:" : "B:"); break;
    }
  }
  if (!allow_newlines) s += static_cast<char>('a' + uniform_index(rng, 26));
  return s;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void criterion_10(Outcome& out) {
  Rng rng(1010);
  std::size_t ok_unified = 0, ok_line = 0;
  for (int i = 0; i < 1000; ++i) {
    Dialog d;
    d.id = "rt-" + std::to_string(i);
    Role role = uniform_index(rng, 2) ? Role::User : Role::System;
    const std::size_t n = 1 + uniform_index(rng, 8);
    for (std::size_t u = 0; u < n; ++u, role = other_role(role)) d.utterances.push_back({role, random_utf8_text(rng, false)});
    if (uniform_index(rng, 2)) d.slots["phone"] = random_utf8_text(rng, false);
    Dialog back = parse_unified(serialize_unified(d));
    ok_unified += back.utterances == d.utterances;
    ok_line += parse_corpus_line(corpus_line(d)) == d;
  }
  out.check(ok_unified == 1000, "unified serialize/parse identity " + std::to_string(ok_unified) + "/1000");
  out.check(ok_line == 1000, "corpus line identity " + std::to_string(ok_line) + "/1000");

  const auto dialogs = generate_synthetic(derive_seed(10, "acceptance.roundtrip"), 100);
  const Vocab v = train_bpe(std::span<const Dialog>(dialogs), 500);
  std::size_t ok_tok = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string s = random_utf8_text(rng, true);
    ok_tok += v.decode(v.encode(s)) == s;
  }
  out.check(ok_tok == 1000, "tokenizer decode(encode(s)) = s on " + std::to_string(ok_tok) + "/1000 random UTF-8 strings");

  ModelConfig sc;
  sc.n_layers = 2;
  sc.n_heads = 2;
  sc.d_model = 32;
  sc.d_ff = 64;
  sc.vocab_size = v.size();
  sc.max_positions = 192;
  sc.init_seed = 77;
  const auto tds = encode_fitting(v, dialogs, sc.max_positions);
  TransformerLM<float> tlm(teacher_config(sc), "teacher.");
  const TeacherHandle<float> teacher(tlm);
  const fs::path dir = fs::temp_directory_path() / ("pral-acceptance-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::vector<std::string> bytes;
  for (int run = 0; run < 2; ++run) {
    RoleAlternatingModel<float> m(sc);
    TrainConfig tc;
    tc.total_steps = 30;
    tc.learning_rate = 1e-3;
    tc.seed = 99;
    train<float>(tds, m, &teacher, tc);
    const fs::path p = dir / ("run" + std::to_string(run) + ".ckpt");
    save_checkpoint(p, m.to_checkpoint());
    bytes.push_back(file_bytes(p));
  }
  fs::remove_all(dir);
  out.check(!bytes[0].empty() && bytes[0] == bytes[1],
            "two same-seed runs (SPR, teacher, dropout on) give bit-identical checkpoints (" +
                std::to_string(bytes[0].size()) + " bytes)");
}

// ---------------------------------------------------------------------------
// 8. Ablation trend

constexpr double kAblationBudgetSeconds = 3600;
constexpr std::size_t kAblationSteps = 600;
constexpr int kAblationSeeds = 5;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 5);
  return s + "]";
}

void criterion_8(Outcome& out) {
  const auto t0 = Clock::now();
  const auto train_dialogs = generate_synthetic(8, 2000);
  const auto held_dialogs = generate_synthetic(9, 200);
  const Vocab v = train_bpe(std::span<const Dialog>(train_dialogs), 1000);
  ModelConfig sc;
  sc.n_layers = 2;
  sc.n_heads = 4;
  sc.d_model = 64;
  sc.d_ff = 256;
  sc.vocab_size = v.size();
  sc.max_positions = 256;
  const auto train_set = encode_fitting(v, train_dialogs, sc.max_positions);
  const auto held = encode_fitting(v, held_dialogs, sc.max_positions);

  const TeacherHandle<float> teacher(make_teacher<float>(sc, v, TeacherRecipe()));
  const double teacher_ppl = lm_perplexity(teacher.model(), std::span<const TokenizedDialog>(held)).perplexity;
  std::cerr << "teacher held-out ppl " << teacher_ppl << " after " << seconds_since(t0) << "s\n";

  struct Variant {
    const char* name;
    bool spr, teacher, discount;
  };
  const Variant variants[] = {{"full", true, true, true},
                              {"no-spr", false, true, true},
                              {"no-teacher", true, false, true},
                              {"no-discount", true, true, false}};
  std::map<std::string, std::vector<double>> ppl;
  for (int seed = 1; seed <= kAblationSeeds; ++seed) {
    for (const auto& var : variants) {
      ModelConfig mc = sc;
      mc.init_seed = static_cast<std::uint64_t>(seed);
      RoleAlternatingModel<float> m(mc);
      TrainConfig tc;
      tc.total_steps = kAblationSteps;
      tc.learning_rate = 1e-3;
      tc.seed = static_cast<std::uint64_t>(seed);
      tc.spr_enabled = var.spr;
      tc.teacher_enabled = var.teacher;
      tc.discount_enabled = var.discount;
      train<float>(train_set, m, var.teacher ? &teacher : nullptr, tc);
      const double p = perplexity(m, std::span<const TokenizedDialog>(held), Side::Both);
      ppl[var.name].push_back(p);
      std::cerr << "seed " << seed << " " << var.name << " held-out ppl " << p << " at " << seconds_since(t0)
                << "s\n";
    }
  }
  const double full = median(ppl["full"]);
  out.check(true, "teacher ppl " + fmt(teacher_ppl) + "; full per-seed " + list(ppl["full"]) + " median " +
                      fmt(full, 5));
  for (const auto& var : variants) {
    if (std::string(var.name) == "full") continue;
    const auto& mine = ppl[var.name];
    int losses = 0;
    for (int s = 0; s < kAblationSeeds; ++s) losses += ppl["full"][s] > mine[s];
    const double med = median(mine);
    out.check(full <= med, std::string(var.name) + " per-seed " + list(mine) + " median " + fmt(med, 5) +
                               ", full <= it (full worse on " + std::to_string(losses) + "/" +
                               std::to_string(kAblationSeeds) + " seeds)");
  }
  const double secs = seconds_since(t0);
  out.check(secs < kAblationBudgetSeconds, "runtime " + fmt(secs) + "s < " + fmt(kAblationBudgetSeconds) + "s");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <criterion 1..10>\n";
    return 2;
  }
  const int c = std::atoi(argv[1]);
  Outcome out;
  try {
    switch (c) {
      case 1: criterion_1(out); break;
      case 2: criterion_2(out); break;
      case 3: criterion_3(out); break;
      case 4: criterion_4(out); break;
      case 5: criterion_5(out); break;
      case 6: criterion_6(out); break;
      case 7: criterion_7(out); break;
      case 8: criterion_8(out); break;
      case 9: criterion_9(out); break;
      case 10: criterion_10(out); break;
      default: std::cerr << "unknown criterion " << c << "\n"; return 2;
    }
  } catch (const std::exception& e) {
    out.check(false, std::string("exception: ") + e.what());
  }
  std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << out.str() << std::endl;
  return out.pass ? 0 : 1;
}

