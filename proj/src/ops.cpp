#include "tpseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace tpseg {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= e;
  }
  return n;
}

namespace {

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const RowMat<S>>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using CMapRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;

template <typename S>
bool needs(const NodePtr<S>& n) {
  return n && n->requires_grad;
}

template <typename S>
CMapMat<S> cmat(const Tensor<S>& t, Index rows, Index cols, Index offset = 0) {
  return CMapMat<S>(t.data() + offset, rows, cols);
}
template <typename S>
MapMat<S> mmat(Tensor<S>& t, Index rows, Index cols, Index offset = 0) {
  return MapMat<S>(t.data() + offset, rows, cols);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

template <typename S>
void require_rank(const Var<S>& x, int rank, const char* op) {
  require(x.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + to_string(x.shape()));
}

template <typename S, typename F, typename DF>
Var<S> unary(const Var<S>& x, F f, DF df) {
  Tensor<S> out(x.shape());
  const auto& xv = x.value().values();
  auto& yv = out.values();
  for (Index i = 0; i < xv.size(); ++i) yv[i] = f(xv[i]);
  return make_op<S>(std::move(out), {x.node()}, [df](Node<S>& self) {
    auto& in = *self.inputs[0];
    auto& gx = in.grad_buffer().values();
    const auto& xv = in.value.values();
    const auto& yv = self.value.values();
    const auto& g = self.grad.values();
    for (Index i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  S e = std::exp(x);
  return e / (S(1) + e);
}

/// out[k] = x[index[k]]; backward scatter-adds.
template <typename S>
Var<S> gather_flat(const Var<S>& x, std::vector<Index> index, Shape shape) {
  Tensor<S> out(std::move(shape));
  const S* src = x.value().data();
  S* dst = out.data();
  for (std::size_t k = 0; k < index.size(); ++k) dst[k] = src[index[k]];
  return make_op<S>(std::move(out), {x.node()}, [index = std::move(index)](Node<S>& self) {
    S* gx = self.inputs[0]->grad_buffer().data();
    const S* g = self.grad.data();
    for (std::size_t k = 0; k < index.size(); ++k) gx[index[k]] += g[k];
  });
}

std::vector<Index> token_index(const Shape& s, Index window) {
  const Index n = s[0], c = s[1], h = s[2], w = s[3];
  const Index nh = h / window, nw = w / window;
  std::vector<Index> idx(static_cast<std::size_t>(n * c * h * w));
  std::size_t k = 0;
  for (Index b = 0; b < n; ++b)
    for (Index wy = 0; wy < nh; ++wy)
      for (Index wx = 0; wx < nw; ++wx)
        for (Index i = 0; i < window; ++i)
          for (Index j = 0; j < window; ++j)
            for (Index ch = 0; ch < c; ++ch)
              idx[k++] = ((b * c + ch) * h + wy * window + i) * w + wx * window + j;
  return idx;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "add");
  Tensor<S> out(a.shape(), a.value().values() + b.value().values());
  return make_op<S>(std::move(out), {a.node(), b.node()}, [](Node<S>& self) {
    for (auto& in : self.inputs)
      if (needs(in)) in->grad_buffer().values() += self.grad.values();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "sub");
  Tensor<S> out(a.shape(), a.value().values() - b.value().values());
  return make_op<S>(std::move(out), {a.node(), b.node()}, [](Node<S>& self) {
    if (needs(self.inputs[0])) self.inputs[0]->grad_buffer().values() += self.grad.values();
    if (needs(self.inputs[1])) self.inputs[1]->grad_buffer().values() -= self.grad.values();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "mul");
  Tensor<S> out(a.shape(), a.value().values().cwiseProduct(b.value().values()));
  return make_op<S>(std::move(out), {a.node(), b.node()}, [](Node<S>& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    if (needs(a)) a->grad_buffer().values() += self.grad.values().cwiseProduct(b->value.values());
    if (needs(b)) b->grad_buffer().values() += self.grad.values().cwiseProduct(a->value.values());
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, std::type_identity_t<S> c) {
  Tensor<S> out(a.shape(), (a.value().values().array() + c).matrix());
  return make_op<S>(std::move(out), {a.node()}, [](Node<S>& self) {
    self.inputs[0]->grad_buffer().values() += self.grad.values();
  });
}

template <typename S>
Var<S> mul_scalar(const Var<S>& a, std::type_identity_t<S> c) {
  Tensor<S> out(a.shape(), a.value().values() * c);
  return make_op<S>(std::move(out), {a.node()}, [c](Node<S>& self) {
    self.inputs[0]->grad_buffer().values() += self.grad.values() * c;
  });
}

template <typename S>
Var<S> scale(const Var<S>& x, const Var<S>& s) {
  require(s.size() == 1, "scale: factor must have one element, got " + to_string(s.shape()));
  const S k = s.value()[0];
  Tensor<S> out(x.shape(), x.value().values() * k);
  return make_op<S>(std::move(out), {x.node(), s.node()}, [](Node<S>& self) {
    auto& x = self.inputs[0];
    auto& s = self.inputs[1];
    if (needs(x)) x->grad_buffer().values() += self.grad.values() * s->value[0];
    if (needs(s)) s->grad_buffer()[0] += self.grad.values().dot(x->value.values());
  });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  constexpr S inv_sqrt2 = S(1) / std::numbers::sqrt2_v<S>;
  constexpr S inv_sqrt2pi = std::numbers::inv_sqrtpi_v<S> * inv_sqrt2;
  return unary(
      x, [](S v) { return v * S(0.5) * (S(1) + std::erf(v * inv_sqrt2)); },
      [](S v, S) {
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(S(-0.5) * v * v);
      });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  return unary(x, [](S v) { return stable_sigmoid(v); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> tanh(const Var<S>& x) {
  return unary(x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> softplus(const Var<S>& x) {
  return unary(
      x, [](S v) { return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](S v, S) { return stable_sigmoid(v); });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  return make_op<S>(Tensor<S>::scalar(x.value().values().sum()), {x.node()}, [](Node<S>& self) {
    self.inputs[0]->grad_buffer().values().array() += self.grad[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const S n = static_cast<S>(std::max<Index>(x.size(), 1));
  return make_op<S>(Tensor<S>::scalar(x.value().values().sum() / n), {x.node()},
                    [n](Node<S>& self) {
                      self.inputs[0]->grad_buffer().values().array() += self.grad[0] / n;
                    });
}

// ---- shape -----------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  return make_op<S>(x.value().reshaped(std::move(shape)), {x.node()}, [](Node<S>& self) {
    self.inputs[0]->grad_buffer().values() += self.grad.values();
  });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  require(axis >= 0 && axis < static_cast<int>(first.size()), "concat: bad axis");
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = 0;
  std::vector<Index> chunks;
  std::vector<NodePtr<S>> inputs;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    require(a.size() == b.size(), "concat: rank mismatch " + to_string(a) + " vs " + to_string(b));
    a[axis] = b[axis] = 0;
    require(a == b, "concat: shape mismatch " + to_string(p.shape()) + " vs " + to_string(first));
    shape[axis] += p.shape()[axis];
    chunks.push_back(p.shape()[axis] * inner);
    inputs.push_back(p.node());
  }
  Tensor<S> out(shape);
  const Index row = shape[axis] * inner;
  for (Index o = 0; o < outer; ++o) {
    Index off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      out.values().segment(o * row + off, chunks[k]) =
          parts[k].value().values().segment(o * chunks[k], chunks[k]);
      off += chunks[k];
    }
  }
  return make_op<S>(std::move(out), std::move(inputs), [chunks, outer, row](Node<S>& self) {
    for (Index o = 0; o < outer; ++o) {
      Index off = 0;
      for (std::size_t k = 0; k < chunks.size(); ++k) {
        if (needs(self.inputs[k])) {
          self.inputs[k]->grad_buffer().values().segment(o * chunks[k], chunks[k]) +=
              self.grad.values().segment(o * row + off, chunks[k]);
        }
        off += chunks[k];
      }
    }
  });
}

template <typename S>
Var<S> element(const Var<S>& x, Index i) {
  require(i >= 0 && i < x.size(), "element: index " + std::to_string(i) + " outside " +
                                      to_string(x.shape()));
  return gather_flat(x, {i}, Shape{});
}

template <typename S>
Var<S> cumsum(const Var<S>& x) {
  require_rank(x, 1, "cumsum");
  Tensor<S> out(x.shape());
  S acc = 0;
  for (Index i = 0; i < x.size(); ++i) out[i] = acc += x.value()[i];
  return make_op<S>(std::move(out), {x.node()}, [](Node<S>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    S acc = 0;
    for (Index i = self.grad.size() - 1; i >= 0; --i) gx[i] += acc += self.grad[i];
  });
}

template <typename S>
Var<S> to_tokens(const Var<S>& x, Index window) {
  require_rank(x, 4, "to_tokens");
  const Shape& s = x.shape();
  require(window > 0 && s[2] % window == 0 && s[3] % window == 0,
          "to_tokens: window " + std::to_string(window) + " does not tile " + to_string(s));
  const Index windows = s[0] * (s[2] / window) * (s[3] / window);
  return gather_flat(x, token_index(s, window), Shape{windows, window * window, s[1]});
}

template <typename S>
Var<S> from_tokens(const Var<S>& t, const Shape& map_shape, Index window) {
  require(shape_size(map_shape) == t.size(),
          "from_tokens: " + to_string(t.shape()) + " does not fill " + to_string(map_shape));
  auto fwd = token_index(map_shape, window);
  std::vector<Index> inv(fwd.size());
  for (std::size_t k = 0; k < fwd.size(); ++k) inv[fwd[k]] = static_cast<Index>(k);
  return gather_flat(t, std::move(inv), map_shape);
}

// ---- linear algebra ---------------------------------------------------------

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  require_rank(w, 2, "linear");
  const Index in = w.shape()[1], outf = w.shape()[0];
  require(x.value().rank() >= 1 && x.shape().back() == in,
          "linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  if (b.defined()) require(b.size() == outf, "linear: bias " + to_string(b.shape()) + " vs weight " + to_string(w.shape()));
  const Index rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outf;
  Tensor<S> out(shape);
  auto y = mmat(out, rows, outf);
  y.noalias() = cmat(x.value(), rows, in) * cmat(w.value(), outf, in).transpose();
  if (b.defined()) y.rowwise() += b.value().values().transpose();
  return make_op<S>(std::move(out), {x.node(), w.node(), b.node()}, [rows, in, outf](Node<S>& self) {
    auto g = cmat(self.grad, rows, outf);
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    auto& b = self.inputs[2];
    if (needs(x)) mmat(x->grad_buffer(), rows, in).noalias() += g * cmat(w->value, outf, in);
    if (needs(w)) mmat(w->grad_buffer(), outf, in).noalias() += g.transpose() * cmat(x->value, rows, in);
    if (needs(b)) b->grad_buffer().values() += g.colwise().sum().transpose();
  });
}

template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const Index B = a.shape()[0], p = a.shape()[1], q = a.shape()[2], r = b.shape()[2];
  require(b.shape()[0] == B && b.shape()[1] == q,
          "bmm: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<S> out(Shape{B, p, r});
  for (Index i = 0; i < B; ++i) {
    mmat(out, p, r, i * p * r).noalias() = cmat(a.value(), p, q, i * p * q) * cmat(b.value(), q, r, i * q * r);
  }
  return make_op<S>(std::move(out), {a.node(), b.node()}, [B, p, q, r](Node<S>& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    for (Index i = 0; i < B; ++i) {
      auto g = cmat(self.grad, p, r, i * p * r);
      if (needs(a)) mmat(a->grad_buffer(), p, q, i * p * q).noalias() += g * cmat(b->value, q, r, i * q * r).transpose();
      if (needs(b)) mmat(b->grad_buffer(), q, r, i * q * r).noalias() += cmat(a->value, p, q, i * p * q).transpose() * g;
    }
  });
}

template <typename S>
Var<S> softmax(const Var<S>& x) {
  require(x.value().rank() >= 1 && x.shape().back() > 0, "softmax: empty input " + to_string(x.shape()));
  const Index cols = x.shape().back(), rows = x.size() / cols;
  Tensor<S> out(x.shape());
  auto y = mmat(out, rows, cols);
  auto xin = cmat(x.value(), rows, cols);
  for (Index i = 0; i < rows; ++i) {
    y.row(i) = (xin.row(i).array() - xin.row(i).maxCoeff()).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return make_op<S>(std::move(out), {x.node()}, [rows, cols](Node<S>& self) {
    auto y = cmat(self.value, rows, cols);
    auto g = cmat(self.grad, rows, cols);
    auto gx = mmat(self.inputs[0]->grad_buffer(), rows, cols);
    for (Index i = 0; i < rows; ++i) {
      const S dot = g.row(i).dot(y.row(i));
      gx.row(i).array() += y.row(i).array() * (g.row(i).array() - dot);
    }
  });
}

template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
  require_rank(q, 3, "attention");
  require_rank(k, 3, "attention");
  require_rank(v, 3, "attention");
  const Index B = q.shape()[0], nq = q.shape()[1], d = q.shape()[2];
  const Index n = k.shape()[1], dv = v.shape()[2];
  require(n > 0, "attention: zero keys " + to_string(k.shape()));
  require(k.shape()[0] == B && v.shape()[0] == B && k.shape()[2] == d && v.shape()[1] == n,
          "attention: inconsistent shapes q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
              ", v " + to_string(v.shape()));
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  auto weights = std::make_shared<std::vector<S>>(static_cast<std::size_t>(B * nq * n));
  Tensor<S> out(Shape{B, nq, dv});
  RowMat<S> a(nq, n);
  for (Index i = 0; i < B; ++i) {
    a.noalias() = cmat(q.value(), nq, d, i * nq * d) * cmat(k.value(), n, d, i * n * d).transpose();
    a *= scale;
    for (Index r = 0; r < nq; ++r) {
      a.row(r) = (a.row(r).array() - a.row(r).maxCoeff()).exp().matrix();
      a.row(r) /= a.row(r).sum();
    }
    MapMat<S>(weights->data() + i * nq * n, nq, n) = a;
    mmat(out, nq, dv, i * nq * dv).noalias() = a * cmat(v.value(), n, dv, i * n * dv);
  }
  return make_op<S>(std::move(out), {q.node(), k.node(), v.node()},
                    [=](Node<S>& self) {
                      auto& qn = self.inputs[0];
                      auto& kn = self.inputs[1];
                      auto& vn = self.inputs[2];
                      RowMat<S> da(nq, n);
                      for (Index i = 0; i < B; ++i) {
                        CMapMat<S> a(weights->data() + i * nq * n, nq, n);
                        auto g = cmat(self.grad, nq, dv, i * nq * dv);
                        if (needs(vn)) mmat(vn->grad_buffer(), n, dv, i * n * dv).noalias() += a.transpose() * g;
                        if (!needs(qn) && !needs(kn)) continue;
                        da.noalias() = g * cmat(vn->value, n, dv, i * n * dv).transpose();
                        for (Index r = 0; r < nq; ++r) {
                          const S dot = da.row(r).dot(a.row(r));
                          da.row(r) = (a.row(r).array() * (da.row(r).array() - dot) * scale).matrix();
                        }
                        if (needs(qn)) mmat(qn->grad_buffer(), nq, d, i * nq * d).noalias() += da * cmat(kn->value, n, d, i * n * d);
                        if (needs(kn)) mmat(kn->grad_buffer(), n, d, i * n * d).noalias() += da.transpose() * cmat(qn->value, nq, d, i * nq * d);
                      }
                    });
}

template <typename S>
Var<S> cross_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
  require_rank(q, 2, "cross_attention");
  require_rank(k, 2, "cross_attention");
  require_rank(v, 2, "cross_attention");
  require(k.shape()[0] > 0, "cross_attention: zero keys " + to_string(k.shape()));
  auto out = attention(reshape(q, Shape{1, q.shape()[0], q.shape()[1]}),
                       reshape(k, Shape{1, k.shape()[0], k.shape()[1]}),
                       reshape(v, Shape{1, v.shape()[0], v.shape()[1]}));
  return reshape(out, Shape{q.shape()[0], v.shape()[1]});
}

// ---- convolution and normalization -------------------------------------------

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, Index stride, Index padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  require(stride > 0 && padding >= 0, "conv2d: stride must be positive and padding non-negative");
  const Index N = x.shape()[0], cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const Index cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  require(w.shape()[1] == cin, "conv2d: kernel " + to_string(w.shape()) + " does not match input " +
                                   to_string(x.shape()));
  if (b.defined()) require(b.size() == cout, "conv2d: bias " + to_string(b.shape()) + " vs kernel " + to_string(w.shape()));
  const Index ho = (H + 2 * padding - kh) / stride + 1, wo = (W + 2 * padding - kw) / stride + 1;
  require(H + 2 * padding >= kh && W + 2 * padding >= kw && ho > 0 && wo > 0,
          "conv2d: kernel " + to_string(w.shape()) + " larger than padded input " + to_string(x.shape()));
  const Index K = cin * kh * kw, P = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // cols holds im2col(x_n) for every n, K x P row-major.
  auto cols = std::make_shared<std::vector<S>>();
  if (!pointwise) {
    cols->assign(static_cast<std::size_t>(N * K * P), S(0));
    for (Index n = 0; n < N; ++n) {
      S* col = cols->data() + n * K * P;
      const S* img = x.value().data() + n * cin * H * W;
      for (Index c = 0; c < cin; ++c)
        for (Index ki = 0; ki < kh; ++ki)
          for (Index kj = 0; kj < kw; ++kj) {
            S* row = col + ((c * kh + ki) * kw + kj) * P;
            for (Index oh = 0; oh < ho; ++oh) {
              const Index ih = oh * stride - padding + ki;
              if (ih < 0 || ih >= H) continue;
              const S* src = img + (c * H + ih) * W;
              for (Index ow = 0; ow < wo; ++ow) {
                const Index iw = ow * stride - padding + kj;
                if (iw >= 0 && iw < W) row[oh * wo + ow] = src[iw];
              }
            }
          }
    }
  }
  Tensor<S> out(Shape{N, cout, ho, wo});
  auto wm = cmat(w.value(), cout, K);
  for (Index n = 0; n < N; ++n) {
    auto y = mmat(out, cout, P, n * cout * P);
    if (pointwise) {
      y.noalias() = wm * cmat(x.value(), K, P, n * K * P);
    } else {
      y.noalias() = wm * CMapMat<S>(cols->data() + n * K * P, K, P);
    }
    if (b.defined()) y.colwise() += b.value().values();
  }
  return make_op<S>(
      std::move(out), {x.node(), w.node(), b.node()},
      [=](Node<S>& self) {
        auto& xn = self.inputs[0];
        auto& wn = self.inputs[1];
        auto& bn = self.inputs[2];
        RowMat<S> dcol;
        for (Index n = 0; n < N; ++n) {
          auto g = cmat(self.grad, cout, P, n * cout * P);
          const S* colp = pointwise ? xn->value.data() + n * K * P : cols->data() + n * K * P;
          if (needs(wn)) mmat(wn->grad_buffer(), cout, K).noalias() += g * CMapMat<S>(colp, K, P).transpose();
          if (needs(bn)) bn->grad_buffer().values() += g.rowwise().sum();
          if (!needs(xn)) continue;
          if (pointwise) {
            mmat(xn->grad_buffer(), K, P, n * K * P).noalias() += cmat(wn->value, cout, K).transpose() * g;
            continue;
          }
          dcol.noalias() = cmat(wn->value, cout, K).transpose() * g;
          S* gimg = xn->grad_buffer().data() + n * cin * H * W;
          for (Index c = 0; c < cin; ++c)
            for (Index ki = 0; ki < kh; ++ki)
              for (Index kj = 0; kj < kw; ++kj) {
                const S* row = dcol.data() + ((c * kh + ki) * kw + kj) * P;
                for (Index oh = 0; oh < ho; ++oh) {
                  const Index ih = oh * stride - padding + ki;
                  if (ih < 0 || ih >= H) continue;
                  S* dst = gimg + (c * H + ih) * W;
                  for (Index ow = 0; ow < wo; ++ow) {
                    const Index iw = ow * stride - padding + kj;
                    if (iw >= 0 && iw < W) dst[iw] += row[oh * wo + ow];
                  }
                }
              }
        }
      });
}

template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& kernels, Index padding) {
  require_rank(x, 4, "depthwise_conv2d");
  require_rank(kernels, 4, "depthwise_conv2d");
  const Index N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const Index kh = kernels.shape()[2], kw = kernels.shape()[3];
  require(kernels.shape()[0] == N && kernels.shape()[1] == C,
          "depthwise_conv2d: kernels " + to_string(kernels.shape()) + " do not match input " + to_string(x.shape()));
  const Index ho = H + 2 * padding - kh + 1, wo = W + 2 * padding - kw + 1;
  require(ho > 0 && wo > 0, "depthwise_conv2d: kernel larger than padded input");
  Tensor<S> out(Shape{N, C, ho, wo});
  // Visits every (output row, kernel tap) pair with the valid column range.
  auto sweep = [=](Index nc, auto&& fn) {
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Index ow0 = std::max<Index>(0, padding - kj);
        const Index ow1 = std::min<Index>(wo, W + padding - kj);
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh - padding + ki;
          if (ih < 0 || ih >= H || ow0 >= ow1) continue;
          fn(nc * kh * kw + ki * kw + kj, (nc * H + ih) * W + ow0 - padding + kj, (nc * ho + oh) * wo + ow0,
             ow1 - ow0);
        }
      }
  };
  const S* xs = x.value().data();
  const S* ks = kernels.value().data();
  S* ys = out.data();
  for (Index nc = 0; nc < N * C; ++nc) {
    sweep(nc, [&](Index kidx, Index xoff, Index yoff, Index len) {
      const S kv = ks[kidx];
      for (Index t = 0; t < len; ++t) ys[yoff + t] += kv * xs[xoff + t];
    });
  }
  return make_op<S>(std::move(out), {x.node(), kernels.node()}, [=](Node<S>& self) {
    auto& xn = self.inputs[0];
    auto& kn = self.inputs[1];
    const S* g = self.grad.data();
    const S* xs = xn->value.data();
    const S* ks = kn->value.data();
    S* gx = needs(xn) ? xn->grad_buffer().data() : nullptr;
    S* gk = needs(kn) ? kn->grad_buffer().data() : nullptr;
    for (Index nc = 0; nc < N * C; ++nc) {
      sweep(nc, [&](Index kidx, Index xoff, Index yoff, Index len) {
        if (gx) {
          const S kv = ks[kidx];
          for (Index t = 0; t < len; ++t) gx[xoff + t] += kv * g[yoff + t];
        }
        if (gk) {
          S acc = 0;
          for (Index t = 0; t < len; ++t) acc += g[yoff + t] * xs[xoff + t];
          gk[kidx] += acc;
        }
      });
    }
  });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, const Var<S>& gamma, const Var<S>& beta,
                  std::type_identity_t<S> eps) {
  require(x.value().rank() >= 2, "group_norm: expected (N, C, ...) input, got " + to_string(x.shape()));
  const Index N = x.shape()[0], C = x.shape()[1];
  require(groups > 0 && C % groups == 0,
          "group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
  if (gamma.defined()) require(gamma.size() == C, "group_norm: gamma " + to_string(gamma.shape()) + " vs input " + to_string(x.shape()));
  if (beta.defined()) require(beta.size() == C, "group_norm: beta " + to_string(beta.shape()) + " vs input " + to_string(x.shape()));
  const Index spatial = N * C == 0 ? 0 : x.size() / (N * C);
  const Index per_group = (C / groups) * spatial;
  auto xhat = std::make_shared<Tensor<S>>(x.shape());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(N * groups));
  Tensor<S> out(x.shape());
  for (Index ng = 0; ng < N * groups; ++ng) {
    auto seg = x.value().values().segment(ng * per_group, per_group).array();
    const S mu = seg.mean();
    const S var = (seg - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[ng] = inv;
    xhat->values().segment(ng * per_group, per_group) = ((seg - mu) * inv).matrix();
  }
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * spatial;
      const S g = gamma.defined() ? gamma.value()[c] : S(1);
      const S bb = beta.defined() ? beta.value()[c] : S(0);
      out.values().segment(off, spatial) = (xhat->values().segment(off, spatial).array() * g + bb).matrix();
    }
  return make_op<S>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [=](Node<S>& self) {
        auto& xn = self.inputs[0];
        auto& gn = self.inputs[1];
        auto& bn = self.inputs[2];
        const auto& g = self.grad.values();
        Vec<S> dxhat(per_group);
        for (Index n = 0; n < N; ++n) {
          for (Index c = 0; c < C; ++c) {
            const Index off = (n * C + c) * spatial;
            if (needs(gn)) gn->grad_buffer()[c] += g.segment(off, spatial).dot(xhat->values().segment(off, spatial));
            if (needs(bn)) bn->grad_buffer()[c] += g.segment(off, spatial).sum();
          }
          if (!needs(xn)) continue;
          for (Index gi = 0; gi < groups; ++gi) {
            const Index ng = n * groups + gi;
            const Index off = ng * per_group;
            const Index cpg = C / groups;
            for (Index c = 0; c < cpg; ++c) {
              const S gam = gn ? gn->value[gi * cpg + c] : S(1);
              dxhat.segment(c * spatial, spatial) = g.segment(off + c * spatial, spatial) * gam;
            }
            auto xh = xhat->values().segment(off, per_group).array();
            const S m1 = dxhat.mean();
            const S m2 = (dxhat.array() * xh).mean();
            xn->grad_buffer().values().segment(off, per_group).array() +=
                (*inv_std)[ng] * (dxhat.array() - m1 - xh * m2);
          }
        }
      });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, std::type_identity_t<S> eps) {
  require(x.value().rank() >= 1, "layer_norm: rank-0 input");
  const Index cols = x.shape().back(), rows = cols == 0 ? 0 : x.size() / cols;
  Tensor<S> out(x.shape());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  auto xin = cmat(x.value(), rows, cols);
  auto y = mmat(out, rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xin.row(r).mean();
    const S var = (xin.row(r).array() - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    y.row(r) = ((xin.row(r).array() - mu) * inv).matrix();
  }
  return make_op<S>(std::move(out), {x.node()}, [=](Node<S>& self) {
    auto xh = cmat(self.value, rows, cols);
    auto g = cmat(self.grad, rows, cols);
    auto gx = mmat(self.inputs[0]->grad_buffer(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const S m1 = g.row(r).mean();
      const S m2 = g.row(r).dot(xh.row(r)) / static_cast<S>(cols);
      gx.row(r).array() += (*inv_std)[r] * (g.row(r).array() - m1 - xh.row(r).array() * m2);
    }
  });
}

// ---- resampling ------------------------------------------------------------

template <typename S>
Var<S> upsample_nearest(const Var<S>& x, Index height, Index width) {
  require_rank(x, 4, "upsample_nearest");
  const Index N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(height > 0 && width > 0 && H > 0 && W > 0, "upsample_nearest: empty extent");
  std::vector<Index> idx(static_cast<std::size_t>(N * C * height * width));
  std::size_t k = 0;
  for (Index nc = 0; nc < N * C; ++nc)
    for (Index i = 0; i < height; ++i)
      for (Index j = 0; j < width; ++j) idx[k++] = (nc * H + i * H / height) * W + j * W / width;
  return gather_flat(x, std::move(idx), Shape{N, C, height, width});
}

template <typename S>
Var<S> upsample_bilinear(const Var<S>& x, Index height, Index width) {
  require_rank(x, 4, "upsample_bilinear");
  const Index N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(height > 0 && width > 0 && H > 0 && W > 0, "upsample_bilinear: empty extent");
  struct Tap {
    Index lo, hi;
    S frac;
  };
  auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
      Index lo = std::min<Index>(static_cast<Index>(src), in - 1);
      t[o] = {lo, std::min<Index>(lo + 1, in - 1), static_cast<S>(src - static_cast<double>(lo))};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H, height));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W, width));
  Tensor<S> out(Shape{N, C, height, width});
  const S* xs = x.value().data();
  for (Index nc = 0; nc < N * C; ++nc) {
    const S* src = xs + nc * H * W;
    S* dst = out.data() + nc * height * width;
    for (Index i = 0; i < height; ++i) {
      const Tap& a = (*ty)[i];
      for (Index j = 0; j < width; ++j) {
        const Tap& b = (*tx)[j];
        const S top = src[a.lo * W + b.lo] * (1 - b.frac) + src[a.lo * W + b.hi] * b.frac;
        const S bot = src[a.hi * W + b.lo] * (1 - b.frac) + src[a.hi * W + b.hi] * b.frac;
        dst[i * width + j] = top * (1 - a.frac) + bot * a.frac;
      }
    }
  }
  return make_op<S>(std::move(out), {x.node()}, [=](Node<S>& self) {
    S* gx = self.inputs[0]->grad_buffer().data();
    for (Index nc = 0; nc < N * C; ++nc) {
      S* dst = gx + nc * H * W;
      const S* g = self.grad.data() + nc * height * width;
      for (Index i = 0; i < height; ++i) {
        const Tap& a = (*ty)[i];
        for (Index j = 0; j < width; ++j) {
          const Tap& b = (*tx)[j];
          const S v = g[i * width + j];
          dst[a.lo * W + b.lo] += v * (1 - a.frac) * (1 - b.frac);
          dst[a.lo * W + b.hi] += v * (1 - a.frac) * b.frac;
          dst[a.hi * W + b.lo] += v * a.frac * (1 - b.frac);
          dst[a.hi * W + b.hi] += v * a.frac * b.frac;
        }
      }
    }
  });
}

// ---- feature-map helpers ---------------------------------------------------------

template <typename S>
Var<S> cosine_map(const Var<S>& f, const Tensor<S>& p) {
  require_rank(f, 4, "cosine_map");
  const Index N = f.shape()[0], C = f.shape()[1], P = f.shape()[2] * f.shape()[3];
  require(p.size() == C, "cosine_map: vector " + to_string(p.shape()) + " vs features " + to_string(f.shape()));
  constexpr S guard = S(1e-8);
  const S pnorm = p.values().norm();
  auto pixel_norm = std::make_shared<Tensor<S>>(Shape{N, P});
  Tensor<S> out(Shape{N, f.shape()[2], f.shape()[3]});
  for (Index n = 0; n < N; ++n) {
    auto fm = cmat(f.value(), C, P, n * C * P);
    auto dot = mmat(out, 1, P, n * P);
    dot.noalias() = p.values().transpose() * fm;
    auto nrm = mmat(*pixel_norm, 1, P, n * P);
    nrm = fm.colwise().norm();
    for (Index i = 0; i < P; ++i) {
      const S denom = nrm(0, i) * pnorm;
      dot(0, i) = (nrm(0, i) < guard || pnorm < guard) ? S(0) : dot(0, i) / denom;
    }
  }
  return make_op<S>(std::move(out), {f.node()}, [=](Node<S>& self) {
    auto& fn = self.inputs[0];
    for (Index n = 0; n < N; ++n) {
      auto fm = cmat(fn->value, C, P, n * C * P);
      auto gf = mmat(fn->grad_buffer(), C, P, n * C * P);
      for (Index i = 0; i < P; ++i) {
        const S nf = (*pixel_norm)[n * P + i];
        if (nf < guard || pnorm < guard) continue;
        const S g = self.grad[n * P + i];
        const S cs = self.value[n * P + i];
        gf.col(i) += g * (p.values() / (nf * pnorm) - fm.col(i) * (cs / (nf * nf)));
      }
    }
  });
}

template <typename S>
Var<S> mul_spatial(const Var<S>& f, const Var<S>& s) {
  require_rank(f, 4, "mul_spatial");
  const Index N = f.shape()[0], C = f.shape()[1], P = f.shape()[2] * f.shape()[3];
  require(s.size() == N * P && s.shape()[0] == N,
          "mul_spatial: map " + to_string(s.shape()) + " vs features " + to_string(f.shape()));
  Tensor<S> out(f.shape());
  for (Index n = 0; n < N; ++n) {
    CMapRow<S> sv(s.value().data() + n * P, P);
    mmat(out, C, P, n * C * P) = cmat(f.value(), C, P, n * C * P).array().rowwise() * sv.array();
  }
  return make_op<S>(std::move(out), {f.node(), s.node()}, [=](Node<S>& self) {
    auto& fn = self.inputs[0];
    auto& sn = self.inputs[1];
    for (Index n = 0; n < N; ++n) {
      auto g = cmat(self.grad, C, P, n * C * P);
      if (needs(fn)) mmat(fn->grad_buffer(), C, P, n * C * P).array() += g.array().rowwise() * CMapRow<S>(sn->value.data() + n * P, P).array();
      if (needs(sn)) mmat(sn->grad_buffer(), 1, P, n * P) += g.cwiseProduct(cmat(fn->value, C, P, n * C * P)).colwise().sum();
    }
  });
}

// ---- losses -------------------------------------------------------------------

template <typename S>
Var<S> bce_with_logits(const Var<S>& logits, const Tensor<S>& target) {
  require(logits.shape() == target.shape(),
          "bce_with_logits: logits " + to_string(logits.shape()) + " vs target " + to_string(target.shape()));
  const auto& x = logits.value().values();
  const auto& t = target.values();
  const S n = static_cast<S>(x.size());
  S total = 0;
  for (Index i = 0; i < x.size(); ++i) {
    total += std::max(x[i], S(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  return make_op<S>(Tensor<S>::scalar(total / n), {logits.node()}, [target, n](Node<S>& self) {
    auto& in = *self.inputs[0];
    auto& gx = in.grad_buffer().values();
    const S g = self.grad[0] / n;
    for (Index i = 0; i < gx.size(); ++i) gx[i] += g * (stable_sigmoid(in.value[i]) - target[i]);
  });
}

template <typename S>
Var<S> soft_dice_loss(const Var<S>& logits, const Tensor<S>& target) {
  require(logits.shape() == target.shape(),
          "soft_dice_loss: logits " + to_string(logits.shape()) + " vs target " + to_string(target.shape()));
  require(logits.value().rank() >= 1 && logits.shape()[0] > 0, "soft_dice_loss: empty batch");
  const Index N = logits.shape()[0], P = logits.size() / N;
  Tensor<S> prob(logits.shape());
  for (Index i = 0; i < prob.size(); ++i) prob[i] = stable_sigmoid(logits.value()[i]);
  std::vector<S> inter(N), denom(N);
  S total = 0;
  for (Index n = 0; n < N; ++n) {
    auto p = prob.values().segment(n * P, P);
    auto t = target.values().segment(n * P, P);
    inter[n] = p.dot(t);
    denom[n] = p.sum() + t.sum() + S(1);
    total += S(1) - (S(2) * inter[n] + S(1)) / denom[n];
  }
  return make_op<S>(Tensor<S>::scalar(total / static_cast<S>(N)), {logits.node()},
                    [=, prob = std::move(prob)](Node<S>& self) {
                      auto& gx = self.inputs[0]->grad_buffer().values();
                      const S g = self.grad[0] / static_cast<S>(N);
                      for (Index n = 0; n < N; ++n) {
                        const S num = S(2) * inter[n] + S(1);
                        const S d2 = denom[n] * denom[n];
                        for (Index i = n * P; i < (n + 1) * P; ++i) {
                          const S dp = -(S(2) * target[i] * denom[n] - num) / d2;
                          gx[i] += g * dp * prob[i] * (S(1) - prob[i]);
                        }
                      }
                    });
}

#define TPSEG_INSTANTIATE_OPS(S)                                                                     \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> add_scalar(const Var<S>&, std::type_identity_t<S>);                                \
  template Var<S> mul_scalar(const Var<S>&, std::type_identity_t<S>);                                \
  template Var<S> scale(const Var<S>&, const Var<S>&);                                               \
  template Var<S> gelu(const Var<S>&);                                                               \
  template Var<S> sigmoid(const Var<S>&);                                                            \
  template Var<S> tanh(const Var<S>&);                                                               \
  template Var<S> softplus(const Var<S>&);                                                           \
  template Var<S> sum(const Var<S>&);                                                                \
  template Var<S> mean(const Var<S>&);                                                               \
  template Var<S> reshape(const Var<S>&, Shape);                                                     \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                           \
  template Var<S> element(const Var<S>&, Index);                                                     \
  template Var<S> cumsum(const Var<S>&);                                                             \
  template Var<S> to_tokens(const Var<S>&, Index);                                                   \
  template Var<S> from_tokens(const Var<S>&, const Shape&, Index);                                   \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                               \
  template Var<S> bmm(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> softmax(const Var<S>&);                                                            \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&);                            \
  template Var<S> cross_attention(const Var<S>&, const Var<S>&, const Var<S>&);                      \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index, Index);                 \
  template Var<S> depthwise_conv2d(const Var<S>&, const Var<S>&, Index);                             \
  template Var<S> group_norm(const Var<S>&, Index, const Var<S>&, const Var<S>&,                    \
                             std::type_identity_t<S>);                                               \
  template Var<S> layer_norm(const Var<S>&, std::type_identity_t<S>);                                \
  template Var<S> upsample_nearest(const Var<S>&, Index, Index);                                     \
  template Var<S> upsample_bilinear(const Var<S>&, Index, Index);                                    \
  template Var<S> cosine_map(const Var<S>&, const Tensor<S>&);                                       \
  template Var<S> mul_spatial(const Var<S>&, const Var<S>&);                                         \
  template Var<S> bce_with_logits(const Var<S>&, const Tensor<S>&);                                  \
  template Var<S> soft_dice_loss(const Var<S>&, const Tensor<S>&);

TPSEG_INSTANTIATE_OPS(float)
TPSEG_INSTANTIATE_OPS(double)

}  // namespace tpseg
