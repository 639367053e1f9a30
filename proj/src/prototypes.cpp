#include "tpseg/prototypes.hpp"

#include <cmath>

#include "tpseg/ops.hpp"
#include "tpseg/rng.hpp"

namespace tpseg {

template <typename S>
std::optional<Tensor<double>> masked_mean_feature(const Tensor<S>& f, const Tensor<S>& mask, double eps) {
  if (f.rank() != 4) throw ShapeError("masked_mean_feature: features must be (N, C, H, W), got " + to_string(f.shape()));
  const Index N = f.dim(0), C = f.dim(1), P = f.dim(2) * f.dim(3);
  const bool ok = (mask.rank() == 4 && mask.shape() == Shape{N, 1, f.dim(2), f.dim(3)}) ||
                  (mask.rank() == 3 && mask.shape() == Shape{N, f.dim(2), f.dim(3)});
  if (!ok) throw ShapeError("masked_mean_feature: mask " + to_string(mask.shape()) + " vs features " + to_string(f.shape()));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(C);
  double mass = 0;
  for (Index n = 0; n < N; ++n) {
    for (Index k = 0; k < P; ++k) {
      const double m = static_cast<double>(mask[n * P + k]);
      if (m == 0) continue;
      mass += m;
      for (Index c = 0; c < C; ++c) acc[c] += m * static_cast<double>(f[(n * C + c) * P + k]);
    }
  }
  if (mass < 0.5) return std::nullopt;
  acc /= mass + eps;
  const double norm = acc.norm();
  if (!(norm > 1e-12)) return std::nullopt;
  return Tensor<double>(Shape{C}, acc / norm);
}

Tensor<double> ema_blend(const Tensor<double>& p, const Tensor<double>& f_hat, double m) {
  if (p.shape() != f_hat.shape()) throw ShapeError("ema: " + to_string(p.shape()) + " vs " + to_string(f_hat.shape()));
  return Tensor<double>(p.shape(), m * p.values() + (1.0 - m) * f_hat.values());
}

Tensor<double> ema_update(const Tensor<double>& p, const Tensor<double>& f_hat, double m) {
  Tensor<double> out = ema_blend(p, f_hat, m);
  const double norm = out.values().norm();
  // antipodal blend at m = 0.5: keep the old direction
  if (!(norm > 1e-12)) return p;
  out.values() /= norm;
  return out;
}

double separation_score(const Tensor<double>& a, const Tensor<double>& b) {
  const double denom = a.values().norm() * b.values().norm();
  const double cos = denom > 0 ? a.values().dot(b.values()) / denom : 0.0;
  return 1.0 - std::clamp(cos, -1.0, 1.0);
}

Tensor<double> random_unit(Index dim, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor<double> t(Shape{dim});
  do {
    for (Index i = 0; i < dim; ++i) t[i] = rng.normal();
  } while (t.values().norm() == 0.0);
  t.values().normalize();
  return t;
}

template <typename S>
PrototypeInitMlp<S> PrototypeInitMlp<S>::make(const Initializer& init, const std::string& name, Index embedding_dim,
                                              Index hidden, Index channels) {
  PrototypeInitMlp m;
  m.w1 = Var<S>::parameter(init.fan_in<S>(name + ".w1", {hidden, embedding_dim}, embedding_dim));
  m.b1 = Var<S>::parameter(Tensor<S>::zeros({hidden}));
  m.w2 = Var<S>::parameter(init.fan_in<S>(name + ".w2", {2 * channels, hidden}, hidden));
  m.b2 = Var<S>::parameter(Tensor<S>::zeros({2 * channels}));
  return m;
}

template <typename S>
void PrototypeInitMlp<S>::collect(ParamList<S>& out, const std::string& name) const {
  out.push_back({name + ".w1", w1, ParamRole::PrototypeInit, -1});
  out.push_back({name + ".b1", b1, ParamRole::PrototypeInit, -1});
  out.push_back({name + ".w2", w2, ParamRole::PrototypeInit, -1});
  out.push_back({name + ".b2", b2, ParamRole::PrototypeInit, -1});
}

template <typename S>
PrototypePair init_prototypes(const Tensor<S>& embedding, const PrototypeInitMlp<S>& mlp, std::uint64_t fallback_seed) {
  NoGradScope no_grad;
  const Var<S> e(embedding.reshaped({1, embedding.size()}));
  const Tensor<S> out = linear(gelu(linear(e, mlp.w1, mlp.b1)), mlp.w2, mlp.b2).value();
  const Index C = out.size() / 2;
  PrototypePair pair;
  for (int half = 0; half < 2; ++half) {
    Tensor<double> v(Shape{C});
    for (Index i = 0; i < C; ++i) v[i] = static_cast<double>(out[half * C + i]);
    const double norm = v.values().norm();
    if (norm > 0 && std::isfinite(norm)) {
      v.values() /= norm;
    } else {
      v = random_unit(C, derive_seed(fallback_seed, static_cast<std::uint64_t>(half)));
    }
    (half == 0 ? pair.fg : pair.bg) = std::move(v);
  }
  return pair;
}

// ---- PrototypeBank ---------------------------------------------------------------

PrototypeBank::PrototypeBank(int tasks, std::vector<Index> dims, double momentum, double eps)
    : tasks_(tasks), dims_(std::move(dims)), momentum_(momentum), eps_(eps) {
  if (tasks <= 0) throw ConfigError("prototype bank needs at least one task");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  pairs_.resize(static_cast<std::size_t>(tasks_) * dims_.size());
  for (int t = 0; t < tasks_; ++t)
    for (int l = 0; l < levels(); ++l) {
      auto& p = pair(t, l);
      p.fg = random_unit(dim(l), derive_seed(static_cast<std::uint64_t>(t), 2 * static_cast<std::uint64_t>(l)));
      p.bg = random_unit(dim(l), derive_seed(static_cast<std::uint64_t>(t), 2 * static_cast<std::uint64_t>(l) + 1));
    }
}

void PrototypeBank::check(int task, int level) const {
  if (task < 0 || task >= tasks_) throw TaskError("unknown task " + std::to_string(task));
  if (level < 0 || level >= levels()) throw RangeError("unknown prototype level " + std::to_string(level));
}

PrototypePair& PrototypeBank::pair(int task, int level) {
  check(task, level);
  return pairs_[static_cast<std::size_t>(task) * dims_.size() + static_cast<std::size_t>(level)];
}

const PrototypePair& PrototypeBank::pair(int task, int level) const {
  check(task, level);
  return pairs_[static_cast<std::size_t>(task) * dims_.size() + static_cast<std::size_t>(level)];
}

template <typename S>
PrototypeBank::Update PrototypeBank::update_from_batch(int task, int level, const Tensor<S>& f, const Tensor<S>& mask) {
  PrototypePair& p = pair(task, level);
  if (f.rank() != 4 || f.dim(1) != dim(level)) {
    throw ShapeError("prototype update: features " + to_string(f.shape()) + " vs prototype dim " + std::to_string(dim(level)));
  }
  Tensor<S> inverse = mask;
  for (Index i = 0; i < inverse.size(); ++i) inverse[i] = S(1) - mask[i];
  Update u;
  if (auto fg = masked_mean_feature(f, mask, eps_)) {
    p.fg = ema_update(p.fg, *fg, momentum_);
    u.fg = true;
  }
  if (auto bg = masked_mean_feature(f, inverse, eps_)) {
    p.bg = ema_update(p.bg, *bg, momentum_);
    u.bg = true;
  }
  if (u.fg || u.bg) ++p.update_count;
  return u;
}

Eigen::MatrixXd PrototypeBank::similarity_matrix(int level) const {
  Eigen::MatrixXd m(tasks_, tasks_);
  for (int i = 0; i < tasks_; ++i)
    for (int j = 0; j < tasks_; ++j) m(i, j) = 1.0 - separation_score(pair(i, level).fg, pair(j, level).fg);
  return m;
}

std::vector<double> PrototypeBank::separation_scores(int level) const {
  std::vector<double> out;
  for (int t = 0; t < tasks_; ++t) out.push_back(separation_score(pair(t, level).fg, pair(t, level).bg));
  return out;
}

double PrototypeBank::max_norm_error() const {
  double worst = 0;
  for (const auto& p : pairs_) {
    worst = std::max(worst, std::abs(p.fg.values().norm() - 1.0));
    worst = std::max(worst, std::abs(p.bg.values().norm() - 1.0));
  }
  return worst;
}

std::uint64_t PrototypeBank::checksum(int task) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const Tensor<double>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(t.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int l = 0; l < levels(); ++l) {
    feed(pair(task, l).fg);
    feed(pair(task, l).bg);
  }
  return h;
}

#define TPSEG_INSTANTIATE_PROTO(S)                                                                                     \
  template std::optional<Tensor<double>> masked_mean_feature(const Tensor<S>&, const Tensor<S>&, double);            \
  template struct PrototypeInitMlp<S>;                                                                                 \
  template PrototypePair init_prototypes(const Tensor<S>&, const PrototypeInitMlp<S>&, std::uint64_t);               \
  template PrototypeBank::Update PrototypeBank::update_from_batch(int, int, const Tensor<S>&, const Tensor<S>&);

TPSEG_INSTANTIATE_PROTO(float)
TPSEG_INSTANTIATE_PROTO(double)

}  // namespace tpseg
