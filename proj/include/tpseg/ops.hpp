#pragma once

#include <type_traits>
#include <vector>

#include "tpseg/autograd.hpp"

// Differentiable operations. All are defined in src/ops.cpp and explicitly
// instantiated for float and double. Feature maps are (N, C, H, W).

namespace tpseg {

// ---- elementwise -----------------------------------------------------------

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> add_scalar(const Var<S>& a, std::type_identity_t<S> c);
template <typename S> Var<S> mul_scalar(const Var<S>& a, std::type_identity_t<S> c);
/// s * x for a one-element `s`; gradient flows to both.
template <typename S> Var<S> scale(const Var<S>& x, const Var<S>& s);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator+(const Var<S>& a, std::type_identity_t<S> c) { return add_scalar(a, c); }
template <typename S> Var<S> operator*(const Var<S>& a, std::type_identity_t<S> c) { return mul_scalar(a, c); }
template <typename S> Var<S> operator*(std::type_identity_t<S> c, const Var<S>& a) { return mul_scalar(a, c); }
template <typename S> Var<S> operator-(const Var<S>& a) { return mul_scalar(a, S(-1)); }

/// Exact GELU, x * Phi(x) with the Gaussian CDF written via erf.
template <typename S> Var<S> gelu(const Var<S>& x);
template <typename S> Var<S> sigmoid(const Var<S>& x);
template <typename S> Var<S> tanh(const Var<S>& x);
template <typename S> Var<S> softplus(const Var<S>& x);

template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);

// ---- shape -----------------------------------------------------------------

template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
/// Concatenation along `axis`; every other extent must agree.
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, int axis);
/// Single flat element as a rank-0 tensor.
template <typename S> Var<S> element(const Var<S>& x, Index i);
/// Inclusive prefix sum of a rank-1 tensor.
template <typename S> Var<S> cumsum(const Var<S>& x);

/// (N, C, H, W) -> (N * (H/window) * (W/window), window^2, C). window == H == W
/// gives one global token sequence per image.
template <typename S> Var<S> to_tokens(const Var<S>& x, Index window);
/// Inverse of to_tokens.
template <typename S> Var<S> from_tokens(const Var<S>& t, const Shape& map_shape, Index window);

// ---- linear algebra ---------------------------------------------------------

/// y = x W^T + b over the last axis. `b` may be undefined.
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b);
/// Batched (B, p, q) x (B, q, r).
template <typename S> Var<S> bmm(const Var<S>& a, const Var<S>& b);
/// Softmax over the last axis.
template <typename S> Var<S> softmax(const Var<S>& x);
/// Scaled dot-product attention, q (B, Q, d), k (B, n, d), v (B, n, dv):
/// out_i = sum_j a_ij v_j, a = softmax(q k^T / sqrt(d)).
template <typename S> Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v);
/// Unbatched form: q (Q, d), k (n, d), v (n, dv).
template <typename S> Var<S> cross_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v);

// ---- convolution and normalization -------------------------------------------

/// Cross-correlation. x (N, Cin, H, W), w (Cout, Cin, kh, kw), optional b (Cout).
/// Output extent: (H + 2 * padding - kh) / stride + 1.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, Index stride, Index padding);
/// Depthwise cross-correlation with one kernel set per batch element,
/// kernels (N, C, kh, kw), stride 1.
template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& kernels, Index padding);
/// gamma/beta are per channel (C).
template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, const Var<S>& gamma, const Var<S>& beta,
                  std::type_identity_t<S> eps);
/// Normalizes the last axis to zero mean, unit variance (no affine).
template <typename S> Var<S> layer_norm(const Var<S>& x, std::type_identity_t<S> eps);

// ---- resampling ------------------------------------------------------------

/// Nearest neighbour, source index floor(dst * in / out).
template <typename S> Var<S> upsample_nearest(const Var<S>& x, Index height, Index width);
/// Bilinear with half-pixel centres (align_corners = false), edge clamped.
template <typename S> Var<S> upsample_bilinear(const Var<S>& x, Index height, Index width);

// ---- feature-map helpers ---------------------------------------------------------

/// Per-pixel cosine similarity of f (N, C, H, W) with a fixed vector p (C),
/// returned as (N, H, W). Pixels with norm below 1e-8 score 0.
template <typename S> Var<S> cosine_map(const Var<S>& f, const Tensor<S>& p);
/// f (N, C, H, W) times s (N, H, W) broadcast over channels.
template <typename S> Var<S> mul_spatial(const Var<S>& f, const Var<S>& s);

// ---- losses -------------------------------------------------------------------

/// Mean binary cross-entropy with logits over all elements.
template <typename S> Var<S> bce_with_logits(const Var<S>& logits, const Tensor<S>& target);
/// Mean over the batch of 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1), p = sigmoid(logits).
template <typename S> Var<S> soft_dice_loss(const Var<S>& logits, const Tensor<S>& target);

}  // namespace tpseg
