#pragma once

// Differentiable primitives. Every function records a backward rule when its
// inputs require grad. Image tensors are NHWC throughout.

#include <span>
#include <vector>

#include "vpcsv/rng.hpp"
#include "vpcsv/tensor.hpp"

namespace vpcsv {

// Elementwise. `b` may match `a` exactly or match a trailing suffix of a's
// shape, in which case it is broadcast over the leading dimensions.
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

/// a[..., K] x b[K, N] -> [..., N]
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// a[B, M, K] x b[B, K, N] -> [B, M, N]; with transpose_b, b is [B, N, K].
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false);
/// x[..., in] W[in, out] + bias[out]; bias may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

struct ConvGeometry {
  Index stride = 1;
  Index padding = 0;
};

/// x[N, H, W, Cin], weight[KH, KW, Cin, Cout], bias[Cout] (optional) -> [N, OH, OW, Cout]
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      ConvGeometry geometry);
/// Adjoint of conv2d in x. x[N, H, W, Cin], weight[Cin, KH, KW, Cout] ->
/// [N, (H-1)*stride - 2*padding + KH, ..., Cout]
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, ConvGeometry geometry);

template <typename Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> log_softmax(const Tensor<Scalar>& x);
/// Softmax over the last axis of x[..., L, L] * factor with entries above the
/// diagonal excluded (causal attention weights).
template <typename Scalar> Tensor<Scalar> causal_softmax(const Tensor<Scalar>& x, Scalar factor);
/// causal_softmax(q k^T, factor) v for q, k, v [G, L, d], without forming the
/// masked half of the score matrices.
template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v, Scalar factor);

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          double eps = 1e-5);

/// table[V, D] looked up at ids -> [ids.size(), D]
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, std::span<const int> ids);
/// x[R, C] rows at `rows` -> [rows.size(), C]
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> rows);

template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& x);
/// mean((a - b)^2)
template <typename Scalar> Tensor<Scalar> squared_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// mean over elements of the logistic loss; targets in [0, 1].
template <typename Scalar>
Tensor<Scalar> bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets);
/// Mean categorical cross-entropy of logits[N, V] against class ids.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets);
/// log softmax(logits)[n, ids[n]] -> [N]
template <typename Scalar>
Tensor<Scalar> pick_log_softmax(const Tensor<Scalar>& logits, std::span<const int> ids);
/// log(1 - softmax(logits)[n, ids[n]]) -> [N], evaluated as a log-sum-exp over
/// the other classes so it stays finite as the probability approaches one.
template <typename Scalar>
Tensor<Scalar> pick_log1m_softmax(const Tensor<Scalar>& logits, std::span<const int> ids);

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <typename Scalar> Tensor<Scalar> permute(const Tensor<Scalar>& x, std::span<const int> order);

template <typename Scalar> Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor);
/// [N, H, W, C] -> [N, C]
template <typename Scalar> Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);

/// Inverted dropout; identity unless `training` and p > 0.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, Rng& rng, bool training);

/// Identity forward, no gradient.
template <typename Scalar> Tensor<Scalar> stop_gradient(const Tensor<Scalar>& x);
/// Forward value of `quantized`; the upstream gradient passes to `input`
/// unchanged and nothing flows to `quantized`.
template <typename Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& quantized, const Tensor<Scalar>& input);

}  // namespace vpcsv
