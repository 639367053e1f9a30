#include "tpseg/model.hpp"

#include <numeric>
#include <sstream>

#include "tpseg/data.hpp"
#include "tpseg/ops.hpp"

namespace tpseg {

Index Census::task_total(int task) const {
  const auto t = static_cast<std::size_t>(task);
  return router.at(t) + gate.at(t) + embedding.at(t) + prototypes.at(t) + rho.at(t);
}

Index Census::total() const {
  Index n = shared_total();
  for (int t = 0; t < static_cast<int>(router.size()); ++t) n += task_total(t);
  return n;
}

std::string Census::to_csv() const {
  std::ostringstream out;
  out << "scope,component,count\n";
  out << "shared,frozen," << frozen << "\n";
  out << "shared,shared_adapter," << shared_adapter << "\n";
  out << "shared,decoder," << decoder << "\n";
  out << "shared,prototype_init," << prototype_init << "\n";
  for (std::size_t t = 0; t < router.size(); ++t) {
    const std::string scope = "task" + std::to_string(t);
    out << scope << ",router," << router[t] << "\n";
    out << scope << ",gate," << gate[t] << "\n";
    out << scope << ",embedding," << embedding[t] << "\n";
    out << scope << ",prototypes," << prototypes[t] << "\n";
    out << scope << ",rho," << rho[t] << "\n";
  }
  out << "all,total," << total() << "\n";
  return out.str();
}

namespace {

std::vector<Index> bank_dims(const ModelConfig& c) {
  std::vector<Index> d;
  for (int k = 0; k < c.levels; ++k) d.push_back(c.fused_channels(k));
  return d;
}

}  // namespace

template <typename S>
TpSeg<S>::TpSeg(const ModelConfig& c)
    : config_(c), encoder_(c, Initializer(c.seed)), decoder_(c, Initializer(c.seed)),
      bank_(c.tasks, bank_dims(c), c.momentum, c.proto_eps) {
  const Initializer init(c.seed);
  for (int k = 0; k < c.levels; ++k) {
    init_mlps_.push_back(PrototypeInitMlp<S>::make(init, "proto.init" + std::to_string(k), c.embedding_dim,
                                                   c.init_hidden, c.fused_channels(k)));
  }
  for (int t = 0; t < c.tasks; ++t) {
    embeddings_.push_back(Var<S>::parameter(init.normal<S>("task" + std::to_string(t) + ".embedding",
                                                           {c.embedding_dim}, 1.0)));
    std::vector<Var<S>> r;
    for (int k = 0; k < c.levels; ++k) r.push_back(Var<S>::parameter(Tensor<S>::scalar(static_cast<S>(c.rho_init))));
    rho_.push_back(std::move(r));
  }
  reset_prototypes();
}

template <typename S>
void TpSeg<S>::check_task(int task) const {
  if (task < 0 || task >= config_.tasks) {
    throw TaskError("unknown task " + std::to_string(task) + " (model has " + std::to_string(config_.tasks) + ")");
  }
}

template <typename S>
Var<S>& TpSeg<S>::rho(int task, int level) {
  check_task(task);
  return rho_[static_cast<std::size_t>(task)].at(static_cast<std::size_t>(level));
}

template <typename S>
Var<S>& TpSeg<S>::embedding(int task) {
  check_task(task);
  return embeddings_[static_cast<std::size_t>(task)];
}

template <typename S>
void TpSeg<S>::reset_prototypes() {
  for (int t = 0; t < config_.tasks; ++t) {
    for (int k = 0; k < config_.levels; ++k) {
      const std::uint64_t seed = derive_seed(config_.seed, static_cast<std::uint64_t>(t * 131 + k));
      PrototypePair& slot = bank_.pair(t, k);
      PrototypePair fresh = init_prototypes(embeddings_[static_cast<std::size_t>(t)].value(),
                                            init_mlps_[static_cast<std::size_t>(k)], seed);
      slot.fg = std::move(fresh.fg);
      slot.bg = std::move(fresh.bg);
      slot.update_count = 0;
    }
  }
}

template <typename S>
ModelOutput<S> TpSeg<S>::forward(const Tensor<S>& images, int task, double tem) const {
  check_task(task);
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw ShapeError("model expects (N, 1, H, W) images, got " + to_string(images.shape()));
  }
  ModelOutput<S> out;
  out.taps = encoder_.forward(Var<S>(images), task, tem);
  for (int k = 0; k < config_.levels; ++k) {
    const PrototypePair& p = bank_.pair(task, k);
    out.prototypes.push_back({Var<S>::constant(p.fg.template cast<S>()), Var<S>::constant(p.bg.template cast<S>()),
                              rho_[static_cast<std::size_t>(task)][static_cast<std::size_t>(k)]});
  }
  out.levels = decoder_.forward(out.taps, out.prototypes);
  const Index H = images.dim(2), W = images.dim(3);
  for (const auto& level : out.levels) {
    const Var<S>& z = level.logits;
    out.logits.push_back(z.shape()[2] == H && z.shape()[3] == W ? z : upsample_bilinear(z, H, W));
  }
  return out;
}

template <typename S>
void TpSeg<S>::update_prototypes(int task, const ModelOutput<S>& out, const Tensor<S>& masks) {
  check_task(task);
  for (int k = 0; k < config_.levels; ++k) {
    const Tensor<S>& f = out.levels[static_cast<std::size_t>(k)].fused.value();
    const Tensor<double> m = downsample_mask(masks.template cast<double>(), f.dim(2), f.dim(3));
    bank_.update_from_batch(task, k, f, m.template cast<S>());
  }
}

template <typename S>
ParamList<S> TpSeg<S>::parameters() const {
  ParamList<S> out;
  encoder_.collect(out);
  decoder_.collect(out);
  for (std::size_t k = 0; k < init_mlps_.size(); ++k) init_mlps_[k].collect(out, "proto.init" + std::to_string(k));
  for (int t = 0; t < config_.tasks; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    out.push_back({"task" + std::to_string(t) + ".embedding", embeddings_[ts], ParamRole::Embedding, t});
    for (std::size_t k = 0; k < rho_[ts].size(); ++k) {
      out.push_back({"task" + std::to_string(t) + ".rho" + std::to_string(k), rho_[ts][k], ParamRole::Rho, t});
    }
  }
  return out;
}

template <typename S>
Census TpSeg<S>::census() const {
  Census c;
  const auto T = static_cast<std::size_t>(config_.tasks);
  c.router.assign(T, 0);
  c.gate.assign(T, 0);
  c.embedding.assign(T, 0);
  c.prototypes.assign(T, 0);
  c.rho.assign(T, 0);
  for (const auto& p : parameters()) {
    const Index n = p.var.size();
    const auto t = static_cast<std::size_t>(p.task);
    switch (p.role) {
      case ParamRole::Frozen: c.frozen += n; break;
      case ParamRole::SharedAdapter: c.shared_adapter += n; break;
      case ParamRole::Decoder: c.decoder += n; break;
      case ParamRole::PrototypeInit: c.prototype_init += n; break;
      case ParamRole::TaskRouter: c.router.at(t) += n; break;
      case ParamRole::Gate: c.gate.at(t) += n; break;
      case ParamRole::Embedding: c.embedding.at(t) += n; break;
      case ParamRole::Rho: c.rho.at(t) += n; break;
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    for (int k = 0; k < bank_.levels(); ++k) {
      const PrototypePair& p = bank_.pair(static_cast<int>(t), k);
      c.prototypes[t] += p.fg.size() + p.bg.size();
    }
  }
  return c;
}

template <typename S>
Var<S> seg_loss(const std::vector<Var<S>>& level_logits, const Tensor<S>& masks, double dice_weight,
                double bce_weight) {
  if (level_logits.empty()) throw ShapeError("seg_loss needs at least one level");
  Var<S> total;
  for (const auto& z : level_logits) {
    const Var<S> term = soft_dice_loss(z, masks) * static_cast<S>(dice_weight) +
                        bce_with_logits(z, masks) * static_cast<S>(bce_weight);
    total = total.defined() ? total + term : term;
  }
  return total * static_cast<S>(1.0 / static_cast<double>(level_logits.size()));
}

template <typename S>
std::vector<double> level_losses(const std::vector<Var<S>>& level_logits, const Tensor<S>& masks, double dice_weight,
                                 double bce_weight) {
  NoGradScope no_grad;
  std::vector<double> out;
  for (const auto& z : level_logits) {
    const Var<S> c(z.value());
    out.push_back(dice_weight * static_cast<double>(soft_dice_loss(c, masks).item()) +
                  bce_weight * static_cast<double>(bce_with_logits(c, masks).item()));
  }
  return out;
}

template class TpSeg<float>;
template class TpSeg<double>;
template Var<float> seg_loss(const std::vector<Var<float>>&, const Tensor<float>&, double, double);
template Var<double> seg_loss(const std::vector<Var<double>>&, const Tensor<double>&, double, double);
template std::vector<double> level_losses(const std::vector<Var<float>>&, const Tensor<float>&, double, double);
template std::vector<double> level_losses(const std::vector<Var<double>>&, const Tensor<double>&, double, double);

}  // namespace tpseg
