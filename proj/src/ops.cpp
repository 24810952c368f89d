#include "pral/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace pral {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

template <typename T>
void require_rows(std::size_t rows, std::size_t n, const char* op, const char* what) {
  if (rows != n) {
    throw DimensionError(std::string(op) + ": " + what + " has " + std::to_string(n) +
                         " entries for " + std::to_string(rows) + " rows");
  }
}

template <typename T>
using RowArray = Eigen::Array<T, 1, Eigen::Dynamic>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowArray<T>>;
template <typename T>
using RowMap = Eigen::Map<RowArray<T>>;

template <typename T>
ConstRowMap<T> as_array(std::span<const T> row) {
  return ConstRowMap<T>(row.data(), static_cast<Eigen::Index>(row.size()));
}
template <typename T>
RowMap<T> as_array(std::span<T> row) {
  return RowMap<T>(row.data(), static_cast<Eigen::Index>(row.size()));
}

// log-sum-exp of one row, max-subtracted.
template <typename T>
T row_logsumexp(std::span<const T> row) {
  const auto a = as_array(row);
  const T m = a.maxCoeff();
  return m + std::log((a - m).exp().sum());
}

template <typename T>
void softmax_into(std::span<const T> row, std::span<T> out) {
  const auto a = as_array(row);
  auto o = as_array(out);
  o = (a - a.maxCoeff()).exp();
  o /= o.sum();
}

// Row-wise KL(softmax(a) || softmax(b)); also fills p = softmax(a) and
// log p - log q when requested.
template <typename T>
T row_kl(std::span<const T> a, std::span<const T> b, std::span<T> p_out, std::span<T> logratio_out) {
  const auto aa = as_array(a);
  const auto ba = as_array(b);
  const T lse_a = row_logsumexp(a);
  const T lse_b = row_logsumexp(b);
  const RowArray<T> log_p = aa - lse_a;
  const RowArray<T> ratio = log_p - (ba - lse_b);
  const RowArray<T> p = log_p.exp();
  if (!p_out.empty()) {
    as_array(p_out) = p;
    as_array(logratio_out) = ratio;
  }
  return (p * ratio).sum();
}

template <typename T>
void check_target(TokenId id, std::size_t vocab) {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
    throw IndexError("target id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(vocab));
  }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.cols() == 0) throw DimensionError("softmax_rows: empty last dimension");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_into(x.row(r), out.row(r));
  return out;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  if (x.cols() == 0) throw DimensionError("log_softmax_rows: empty last dimension");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T lse = row_logsumexp(x.row(r));
    auto in = x.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return out;
}

template <typename T>
std::vector<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                             std::span<const T> mask) {
  require_rows<T>(logits.rows(), targets.size(), "cross_entropy", "targets");
  require_rows<T>(logits.rows(), mask.size(), "cross_entropy", "mask");
  std::vector<T> out(logits.rows(), T{0});
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (mask[r] == T{0}) continue;
    check_target<T>(targets[r], logits.cols());
    auto row = logits.row(r);
    out[r] = row_logsumexp(row) - row[static_cast<std::size_t>(targets[r])];
  }
  return out;
}

template <typename T>
T kl_divergence_rows(const Tensor<T>& p_logits, const Tensor<T>& q_logits, std::span<const T> mask) {
  require_same_shape(p_logits, q_logits, "kl_divergence_rows");
  require_rows<T>(p_logits.rows(), mask.size(), "kl_divergence_rows", "mask");
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < p_logits.rows(); ++r) {
    if (mask[r] == T{0}) continue;
    total += row_kl<T>(p_logits.row(r), q_logits.row(r), {}, {});
    ++count;
  }
  return count == 0 ? T{0} : total / static_cast<T>(count);
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = matmul(a->value, b->value);
  const bool rg = tape.needs_grad({&a, &b});
  return tape.record(std::move(value), rg, [a, b](Node<T>& out) {
    auto dc = as_matrix(out.grad);
    if (a->requires_grad) as_matrix(a->grad_buffer()).noalias() += dc * as_matrix(b->value).transpose();
    if (b->requires_grad) as_matrix(b->grad_buffer()).noalias() += as_matrix(a->value).transpose() * dc;
  });
}

template <typename T>
Var<T> matmul_transposed(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_matrix(a->value, "matmul_transposed");
  require_matrix(b->value, "matmul_transposed");
  if (a->value.dim(1) != b->value.dim(1)) {
    throw DimensionError("matmul_transposed: inner dimensions differ for " +
                         shape_string(a->value.shape()) + " and " + shape_string(b->value.shape()));
  }
  Tensor<T> value({a->value.dim(0), b->value.dim(0)});
  as_matrix(value).noalias() = as_matrix(a->value) * as_matrix(b->value).transpose();
  const bool rg = tape.needs_grad({&a, &b});
  return tape.record(std::move(value), rg, [a, b](Node<T>& out) {
    auto dc = as_matrix(out.grad);
    if (a->requires_grad) as_matrix(a->grad_buffer()).noalias() += dc * as_matrix(b->value);
    if (b->requires_grad) as_matrix(b->grad_buffer()).noalias() += dc.transpose() * as_matrix(a->value);
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> value = a->value;
  for (std::size_t i = 0; i < value.size(); ++i) value[i] += b->value[i];
  const bool rg = tape.needs_grad({&a, &b});
  return tape.record(std::move(value), rg, [a, b](Node<T>& out) {
    for (const Var<T>* in : {&a, &b}) {
      if (!(*in)->requires_grad) continue;
      auto& g = (*in)->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

template <typename T>
Var<T> add_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias) {
  if (bias->value.size() != x->value.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias->value.shape()) + " does not match " +
                         shape_string(x->value.shape()));
  }
  Tensor<T> value = x->value;
  const std::size_t cols = value.cols();
  for (std::size_t r = 0; r < value.rows(); ++r) {
    T* row = value.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bias->value[c];
  }
  const bool rg = tape.needs_grad({&x, &bias});
  return tape.record(std::move(value), rg, [x, bias](Node<T>& out) {
    if (x->requires_grad) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (bias->requires_grad) {
      auto& g = bias->grad_buffer();
      const std::size_t cols = out.grad.cols();
      for (std::size_t r = 0; r < out.grad.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += out.grad[r * cols + c];
      }
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor) {
  Tensor<T> value = x->value;
  for (T& v : value.values()) v *= factor;
  const bool rg = tape.needs_grad({&x});
  return tape.record(std::move(value), rg, [x, factor](Node<T>& out) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * out.grad[i];
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  T total = 0;
  for (T v : x->value.values()) total += v;
  const bool rg = tape.needs_grad({&x});
  return tape.record(Tensor<T>::scalar(total), rg, [x](Node<T>& out) {
    auto& g = x->grad_buffer();
    const T d = out.grad[0];
    for (T& v : g.values()) v += d;
  });
}

template <typename T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = T(0.044715);
  Tensor<T> value(x->value.shape());
  for (std::size_t i = 0; i < value.size(); ++i) {
    const T u = x->value[i];
    value[i] = T(0.5) * u * (T(1) + std::tanh(c * (u + k * u * u * u)));
  }
  const bool rg = tape.needs_grad({&x});
  return tape.record(std::move(value), rg, [x, c, k](Node<T>& out) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T u = x->value[i];
      const T t = std::tanh(c * (u + k * u * u * u));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * k * u * u);
      g[i] += d * out.grad[i];
    }
  });
}

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t rows = x->value.rows();
  const std::size_t cols = x->value.cols();
  if (gain->value.size() != cols || bias->value.size() != cols) {
    throw DimensionError("layer_norm: gain/bias do not match " + shape_string(x->value.shape()));
  }
  Tensor<T> value(x->value.shape());
  Tensor<T> normalized(x->value.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x->value.row(r);
    T mean = 0;
    for (T v : in) mean += v;
    mean /= static_cast<T>(cols);
    T var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    auto xh = normalized.row(r);
    auto o = value.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      xh[c] = (in[c] - mean) * inv_std[r];
      o[c] = gain->value[c] * xh[c] + bias->value[c];
    }
  }
  const bool rg = tape.needs_grad({&x, &gain, &bias});
  return tape.record(std::move(value), rg,
                     [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& out) {
    const std::size_t rows = out.grad.rows();
    const std::size_t cols = out.grad.cols();
    if (gain->requires_grad || bias->requires_grad) {
      auto& gg = gain->grad_buffer();
      auto& gb = bias->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        auto dy = out.grad.row(r);
        auto xh = normalized.row(r);
        for (std::size_t c = 0; c < cols; ++c) {
          gg[c] += dy[c] * xh[c];
          gb[c] += dy[c];
        }
      }
    }
    if (!x->requires_grad) return;
    auto& gx = x->grad_buffer();
    std::vector<T> dxh(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      auto dy = out.grad.row(r);
      auto xh = normalized.row(r);
      T mean_d = 0;
      T mean_dx = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        dxh[c] = dy[c] * gain->value[c];
        mean_d += dxh[c];
        mean_dx += dxh[c] * xh[c];
      }
      mean_d /= static_cast<T>(cols);
      mean_dx /= static_cast<T>(cols);
      auto g = gx.row(r);
      for (std::size_t c = 0; c < cols; ++c) g[c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
    }
  });
}

template <typename T>
Var<T> embedding(Tape<T>& tape, const Var<T>& table, std::span<const TokenId> ids) {
  require_matrix(table->value, "embedding");
  const std::size_t n_rows = table->value.dim(0);
  const std::size_t d = table->value.dim(1);
  Tensor<T> value({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(n_rows) + " rows");
    }
    auto src = table->value.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), value.row(i).begin());
  }
  const bool rg = tape.needs_grad({&table});
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return tape.record(std::move(value), rg, [table, saved = std::move(saved)](Node<T>& out) {
    auto& g = table->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      auto dst = g.row(static_cast<std::size_t>(saved[i]));
      auto src = out.grad.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var<T> causal_self_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                             std::size_t n_heads) {
  require_same_shape(q->value, k->value, "causal_self_attention");
  require_same_shape(q->value, v->value, "causal_self_attention");
  require_matrix(q->value, "causal_self_attention");
  const auto n = static_cast<Eigen::Index>(q->value.dim(0));
  const std::size_t d = q->value.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_self_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const auto dh = static_cast<Eigen::Index>(d / n_heads);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  // probs[h] holds the n x n attention matrix of head h, zero above the diagonal.
  std::vector<RowMat<T>> probs(n_heads);
  Tensor<T> value(q->value.shape());
  auto Q = as_matrix(q->value);
  auto K = as_matrix(k->value);
  auto V = as_matrix(v->value);
  auto O = as_matrix(value);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dh;
    RowMat<T>& P = probs[h];
    P.noalias() = (Q.middleCols(c0, dh) * K.middleCols(c0, dh).transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < n; ++i) {
      T m = P(i, 0);
      for (Eigen::Index j = 1; j <= i; ++j) m = std::max(m, P(i, j));
      T s = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        P(i, j) = std::exp(P(i, j) - m);
        s += P(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= s;
      for (Eigen::Index j = i + 1; j < n; ++j) P(i, j) = T(0);
    }
    O.middleCols(c0, dh).noalias() = P * V.middleCols(c0, dh);
  }

  const bool rg = tape.needs_grad({&q, &k, &v});
  if (!rg) probs.clear();
  return tape.record(std::move(value), rg, [q, k, v, n_heads, dh, inv_sqrt, probs = std::move(probs)](Node<T>& out) {
    auto Q = as_matrix(q->value);
    auto K = as_matrix(k->value);
    auto V = as_matrix(v->value);
    auto dO = as_matrix(out.grad);
    const Eigen::Index n = Q.rows();
    RowMat<T> dP;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const RowMat<T>& P = probs[h];
      if (v->requires_grad) {
        as_matrix(v->grad_buffer()).middleCols(c0, dh).noalias() += P.transpose() * dO.middleCols(c0, dh);
      }
      if (!q->requires_grad && !k->requires_grad) continue;
      dP.noalias() = dO.middleCols(c0, dh) * V.middleCols(c0, dh).transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        T dot = 0;
        for (Eigen::Index j = 0; j <= i; ++j) dot += P(i, j) * dP(i, j);
        for (Eigen::Index j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
        for (Eigen::Index j = i + 1; j < n; ++j) dP(i, j) = T(0);
      }
      if (q->requires_grad) {
        as_matrix(q->grad_buffer()).middleCols(c0, dh).noalias() += dP * K.middleCols(c0, dh);
      }
      if (k->requires_grad) {
        as_matrix(k->grad_buffer()).middleCols(c0, dh).noalias() += dP.transpose() * Q.middleCols(c0, dh);
      }
    }
  });
}

template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x->value.size());
  Tensor<T> value = x->value;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform_unit(rng) < rate ? T(0) : keep_scale;
    value[i] *= mask[i];
  }
  const bool rg = tape.needs_grad({&x});
  return tape.record(std::move(value), rg, [x, mask = std::move(mask)](Node<T>& out) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * out.grad[i];
  });
}

template <typename T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> value = softmax_rows(x->value);
  const bool rg = tape.needs_grad({&x});
  return tape.record(value, rg, [x, value](Node<T>& out) {
    auto& g = x->grad_buffer();
    for (std::size_t r = 0; r < value.rows(); ++r) {
      auto p = value.row(r);
      auto dy = out.grad.row(r);
      T dot = 0;
      for (std::size_t c = 0; c < p.size(); ++c) dot += p[c] * dy[c];
      auto gr = g.row(r);
      for (std::size_t c = 0; c < p.size(); ++c) gr[c] += p[c] * (dy[c] - dot);
    }
  });
}

template <typename T>
Var<T> weighted_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const TokenId> targets,
                              std::span<const T> weights, std::vector<T>* row_losses) {
  const Tensor<T>& x = logits->value;
  require_rows<T>(x.rows(), targets.size(), "weighted_cross_entropy", "targets");
  require_rows<T>(x.rows(), weights.size(), "weighted_cross_entropy", "weights");
  const bool rg = tape.needs_grad({&logits});
  if (row_losses) row_losses->assign(x.rows(), T{0});
  T total = 0;
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (weights[r] != T{0}) active.push_back(r);
  }
  // Softmax of every active row, kept for the adjoint.
  Tensor<T> probs({rg ? active.size() : std::size_t{0}, x.cols()});
  for (std::size_t i = 0; i < active.size(); ++i) {
    const std::size_t r = active[i];
    check_target<T>(targets[r], x.cols());
    auto row = x.row(r);
    const T ce = row_logsumexp(row) - row[static_cast<std::size_t>(targets[r])];
    if (row_losses) (*row_losses)[r] = ce;
    total += weights[r] * ce;
    if (rg) softmax_into<T>(row, probs.row(i));
  }
  std::vector<TokenId> t(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  return tape.record(Tensor<T>::scalar(total), rg,
                     [logits, t = std::move(t), w = std::move(w), active = std::move(active),
                      probs = std::move(probs)](Node<T>& out) {
    auto& g = logits->grad_buffer();
    const T d = out.grad[0];
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      const T coeff = d * w[r];
      as_array(g.row(r)) += coeff * as_array(probs.row(i));
      g.row(r)[static_cast<std::size_t>(t[r])] -= coeff;
    }
  });
}

template <typename T>
Var<T> weighted_kl_rows(Tape<T>& tape, const Var<T>& p_logits, const Var<T>& q_logits,
                        std::span<const T> weights, std::vector<T>* row_kls) {
  require_same_shape(p_logits->value, q_logits->value, "weighted_kl_rows");
  require_rows<T>(p_logits->value.rows(), weights.size(), "weighted_kl_rows", "weights");
  const bool rg = tape.needs_grad({&p_logits, &q_logits});
  const std::size_t cols = p_logits->value.cols();
  if (row_kls) row_kls->assign(weights.size(), T{0});
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < weights.size(); ++r) {
    if (weights[r] != T{0}) active.push_back(r);
  }
  // Per active row: p = softmax(p_logits) and log p - log q for the adjoint.
  Tensor<T> p({rg ? active.size() : std::size_t{0}, cols});
  Tensor<T> ratio({rg ? active.size() : std::size_t{0}, cols});
  std::vector<T> kls(active.size());
  T total = 0;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const std::size_t r = active[i];
    kls[i] = rg ? row_kl<T>(p_logits->value.row(r), q_logits->value.row(r), p.row(i), ratio.row(i))
                : row_kl<T>(p_logits->value.row(r), q_logits->value.row(r), {}, {});
    if (row_kls) (*row_kls)[r] = kls[i];
    total += weights[r] * kls[i];
  }
  std::vector<T> w(weights.begin(), weights.end());
  return tape.record(Tensor<T>::scalar(total), rg,
                     [p_logits, q_logits, w = std::move(w), active = std::move(active), kls = std::move(kls),
                      p = std::move(p), ratio = std::move(ratio)](Node<T>& out) {
    const T d = out.grad[0];
    Tensor<T> q({p_logits->value.cols()});
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      const T coeff = d * w[r];
      const auto pr = as_array(p.row(i));
      if (p_logits->requires_grad) {
        as_array(p_logits->grad_buffer().row(r)) += coeff * pr * (as_array(ratio.row(i)) - kls[i]);
      }
      if (q_logits->requires_grad) {
        softmax_into<T>(q_logits->value.row(r), q.values());
        as_array(q_logits->grad_buffer().row(r)) += coeff * (as_array(std::as_const(q).values()) - pr);
      }
    }
  });
}

#define PRAL_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                 \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                             \
  template std::vector<T> cross_entropy(const Tensor<T>&, std::span<const TokenId>, std::span<const T>); \
  template T kl_divergence_rows(const Tensor<T>&, const Tensor<T>&, std::span<const T>);             \
  template Var<T> matmul(Tape<T>&, const Var<T>&, const Var<T>&);                                    \
  template Var<T> matmul_transposed(Tape<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> add_bias(Tape<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> scale(Tape<T>&, const Var<T>&, T);                                                 \
  template Var<T> sum(Tape<T>&, const Var<T>&);                                                      \
  template Var<T> gelu(Tape<T>&, const Var<T>&);                                                     \
  template Var<T> layer_norm(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T);              \
  template Var<T> embedding(Tape<T>&, const Var<T>&, std::span<const TokenId>);                      \
  template Var<T> causal_self_attention(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t); \
  template Var<T> dropout(Tape<T>&, const Var<T>&, double, Rng&);                                    \
  template Var<T> softmax_rows(Tape<T>&, const Var<T>&);                                             \
  template Var<T> weighted_cross_entropy(Tape<T>&, const Var<T>&, std::span<const TokenId>, std::span<const T>, std::vector<T>*); \
  template Var<T> weighted_kl_rows(Tape<T>&, const Var<T>&, const Var<T>&, std::span<const T>, std::vector<T>*);

PRAL_INSTANTIATE_OPS(float)
PRAL_INSTANTIATE_OPS(double)

}  // namespace pral
