#pragma once

#include <span>
#include <vector>

#include "pral/autograd.hpp"
#include "pral/rng.hpp"
#include "pral/tensor.hpp"

namespace pral {

// ---------------------------------------------------------------------------
// Plain tensor functions (no gradient).

// 2-D matrix product. Throws DimensionError naming both shapes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Row-wise softmax over the last dimension, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x);

// Per-row -log softmax(logits)[target]; rows with mask 0 yield exactly 0.
template <typename T>
std::vector<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                             std::span<const T> mask);

// Mean over unmasked rows of KL(softmax(p_logits) || softmax(q_logits)).
// An all-zero mask gives 0.
template <typename T>
T kl_divergence_rows(const Tensor<T>& p_logits, const Tensor<T>& q_logits, std::span<const T> mask);

// ---------------------------------------------------------------------------
// Taped operations. Activations are 2-D [rows x cols] unless noted.

template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// a * b^T, used for the tied output projection.
template <typename T>
Var<T> matmul_transposed(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// x[r, :] + bias for every row r.
template <typename T>
Var<T> add_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor);

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

// tanh approximation of GELU.
template <typename T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5));

// Gathers rows of `table` ([n x d]) at `ids`.
template <typename T>
Var<T> embedding(Tape<T>& tape, const Var<T>& table, std::span<const TokenId> ids);

// Multi-head scaled dot-product attention with a causal mask; q, k, v are
// [n x d_model] and heads split the columns evenly.
template <typename T>
Var<T> causal_self_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                             std::size_t n_heads);

// Inverted dropout. rate 0 returns x unchanged.
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, Rng& rng);

template <typename T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x);

// Scalar sum_r weights[r] * CE(logits[r], targets[r]). Rows with weight 0 are
// skipped entirely, so their targets are not range-checked. `row_losses`,
// if given, receives the unweighted CE of every row (0 where skipped).
template <typename T>
Var<T> weighted_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const TokenId> targets,
                              std::span<const T> weights, std::vector<T>* row_losses = nullptr);

// Scalar sum_r weights[r] * KL(softmax(p_logits[r]) || softmax(q_logits[r])).
// Differentiable in both arguments.
template <typename T>
Var<T> weighted_kl_rows(Tape<T>& tape, const Var<T>& p_logits, const Var<T>& q_logits,
                        std::span<const T> weights, std::vector<T>* row_kls = nullptr);

}  // namespace pral
