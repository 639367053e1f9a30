#include "tpseg/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "tpseg/ops.hpp"

namespace tpseg {

double TemperatureSchedule::operator()(long step) const {
  const double progress = total_steps > 0 ? std::min(static_cast<double>(std::max(step, 0L)) / total_steps, 1.0) : 1.0;
  return start - (start - end) * progress;
}

double temperature(long step, const TemperatureSchedule& schedule) { return schedule(step); }

namespace {

double softplus_d(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<double> routing_weights(const std::vector<double>& raw_gate, double tem) {
  if (!(tem > 0)) throw ConfigError("temperature must be positive");
  std::vector<double> w(raw_gate.size());
  double c = 0;
  for (std::size_t i = 0; i < raw_gate.size(); ++i) {
    c += softplus_d(raw_gate[i]);
    w[i] = sigmoid_d(c / tem);
  }
  return w;
}

double routing_weight(const std::vector<double>& raw_gate, Index block, double tem) {
  const Index blocks = static_cast<Index>(raw_gate.size()) + 2;
  if (block < 2 || block >= blocks) {
    throw RangeError("gated block index " + std::to_string(block) + " outside [2, " + std::to_string(blocks - 1) + "]");
  }
  return routing_weights(raw_gate, tem)[static_cast<std::size_t>(block - 2)];
}

Index split_position(const std::vector<double>& raw_gate, double tem) {
  const auto w = routing_weights(raw_gate, tem);
  if (w.empty()) return 2;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.5) return static_cast<Index>(i) + 2;
  // all cumulative sums are zero: w == 0.5 everywhere
  return 2;
}

// ---- Router -------------------------------------------------------------------

template <typename S>
Router<S> Router<S>::make(const Initializer& init, const std::string& name, Index channels, Index hidden, Index groups) {
  Router r;
  r.groups = groups;
  r.gamma = Var<S>::parameter(Tensor<S>::full({channels}, S(1)));
  r.beta = Var<S>::parameter(Tensor<S>::zeros({channels}));
  r.w1 = Var<S>::parameter(init.fan_in<S>(name + ".w1", {hidden, channels, 3, 3}, channels * 9));
  r.b1 = Var<S>::parameter(Tensor<S>::zeros({hidden}));
  r.w2 = Var<S>::parameter(init.fan_in<S>(name + ".w2", {channels, hidden, 1, 1}, hidden, 0.1));
  r.b2 = Var<S>::parameter(Tensor<S>::zeros({channels}));
  return r;
}

template <typename S>
Var<S> Router<S>::operator()(const Var<S>& h) const {
  if (h.value().rank() != 4 || h.shape()[1] != gamma.size()) {
    throw ShapeError("router expects (N, " + std::to_string(gamma.size()) + ", H, W), got " + to_string(h.shape()));
  }
  Var<S> x = group_norm(h, groups, gamma, beta, S(1e-5));
  x = gelu(conv2d(x, w1, b1, 1, 1));
  return conv2d(x, w2, b2, 1, 0);
}

template <typename S>
void Router<S>::collect(ParamList<S>& out, const std::string& name, ParamRole role, int task) const {
  out.push_back({name + ".gn.gamma", gamma, role, task});
  out.push_back({name + ".gn.beta", beta, role, task});
  out.push_back({name + ".conv1.w", w1, role, task});
  out.push_back({name + ".conv1.b", b1, role, task});
  out.push_back({name + ".conv2.w", w2, role, task});
  out.push_back({name + ".conv2.b", b2, role, task});
}

// ---- FrozenBlock --------------------------------------------------------------------

template <typename S>
FrozenBlock<S> FrozenBlock<S>::make(const Initializer& init, const std::string& name, Index channels, Index window,
                                    Index mlp_ratio) {
  const Index hidden = channels * mlp_ratio;
  FrozenBlock b;
  b.window = window;
  b.wq = Var<S>(init.fan_in<S>(name + ".wq", {channels, channels}, channels));
  b.wk = Var<S>(init.fan_in<S>(name + ".wk", {channels, channels}, channels));
  b.wv = Var<S>(init.fan_in<S>(name + ".wv", {channels, channels}, channels));
  b.wo = Var<S>(init.fan_in<S>(name + ".wo", {channels, channels}, channels));
  b.bo = Var<S>(init.normal<S>(name + ".bo", {channels}, 0.02));
  b.w1 = Var<S>(init.fan_in<S>(name + ".fc1.w", {hidden, channels}, channels));
  b.b1 = Var<S>(init.normal<S>(name + ".fc1.b", {hidden}, 0.02));
  b.w2 = Var<S>(init.fan_in<S>(name + ".fc2.w", {channels, hidden}, hidden));
  b.b2 = Var<S>(init.normal<S>(name + ".fc2.b", {channels}, 0.02));
  return b;
}

template <typename S>
Var<S> FrozenBlock<S>::operator()(const Var<S>& h) const {
  Var<S> t = to_tokens(h, window);
  const Var<S> a = layer_norm(t, S(1e-6));
  t = t + linear(attention(linear(a, wq, Var<S>()), linear(a, wk, Var<S>()), linear(a, wv, Var<S>())), wo, bo);
  const Var<S> m = layer_norm(t, S(1e-6));
  t = t + linear(gelu(linear(m, w1, b1)), w2, b2);
  return from_tokens(t, h.shape(), window);
}

template <typename S>
void FrozenBlock<S>::collect(ParamList<S>& out, const std::string& name) const {
  for (auto [suffix, v] : {std::pair{".wq", wq}, {".wk", wk}, {".wv", wv}, {".wo", wo}, {".bo", bo},
                           {".fc1.w", w1}, {".fc1.b", b1}, {".fc2.w", w2}, {".fc2.b", b2}}) {
    out.push_back({name + suffix, v, ParamRole::Frozen, -1});
  }
}

// ---- Encoder ---------------------------------------------------------------------

template <typename S>
Encoder<S>::Encoder(const ModelConfig& c, const Initializer& init)
    : tasks_(c.tasks), stage1_blocks_(c.stage1_blocks), mode_(c.route_mode) {
  c.validate();
  const Index c0 = c.stem_channels, c1 = c.stage1_channels, c2 = c.stage2_channels;
  stem_w_ = Var<S>(init.fan_in<S>("enc.stem.w", {c0, 1, 3, 3}, 9, 2.0));
  stem_b_ = Var<S>(init.normal<S>("enc.stem.b", {c0}, 0.1));
  patch_w_ = Var<S>(init.fan_in<S>("enc.patch.w", {c1, c0, 2, 2}, c0 * 4));
  patch_b_ = Var<S>(Tensor<S>::zeros({c1}));
  down_w_ = Var<S>(init.fan_in<S>("enc.down.w", {c2, c1, 2, 2}, c1 * 4));
  down_b_ = Var<S>(Tensor<S>::zeros({c2}));
  for (Index b = 0; b < c.blocks; ++b) {
    const std::string name = "enc.block" + std::to_string(b);
    const bool first = b < c.stage1_blocks;
    const Index ch = first ? c1 : c2;
    frozen_.push_back(FrozenBlock<S>::make(init, name, ch, first ? c.stage1_window : c.stage2_window, c.mlp_ratio));
    shared_.push_back(Router<S>::make(init, name + ".shared", ch, ch / c.adapter_reduction, c.adapter_groups));
  }
  const Index gated = c.gated_blocks();
  task_.resize(static_cast<std::size_t>(tasks_));
  for (int t = 0; t < tasks_; ++t) {
    for (Index b = 2; b < c.blocks; ++b) {
      const Index ch = width(b);
      task_[t].push_back(Router<S>::make(init, "enc.block" + std::to_string(b) + ".task" + std::to_string(t), ch,
                                         ch / c.adapter_reduction, c.adapter_groups));
    }
    gates_.push_back(Var<S>::parameter(Tensor<S>::full({gated}, static_cast<S>(c.gate_init))));
  }
}

template <typename S>
Index Encoder<S>::width(Index block) const {
  if (block < 0 || block >= blocks()) throw RangeError("block index " + std::to_string(block) + " out of range");
  return frozen_[static_cast<std::size_t>(block)].wq.shape()[0];
}

template <typename S>
void Encoder<S>::check_task(int task) const {
  if (task < 0 || task >= tasks_) {
    throw TaskError("unknown task " + std::to_string(task) + " (model has " + std::to_string(tasks_) + ")");
  }
}

template <typename S>
void Encoder<S>::check_block(Index block) const {
  if (block < 2 || block >= blocks()) {
    throw RangeError("gated block index " + std::to_string(block) + " outside [2, " + std::to_string(blocks() - 1) + "]");
  }
}

template <typename S>
Var<S> Encoder<S>::shared_increment(const Var<S>& h, Index block) const {
  width(block);
  return shared_[static_cast<std::size_t>(block)](h);
}

template <typename S>
Var<S> Encoder<S>::task_increment(const Var<S>& h, int task, Index block) const {
  check_task(task);
  check_block(block);
  return task_[static_cast<std::size_t>(task)][static_cast<std::size_t>(block - 2)](h);
}

template <typename S>
Var<S> Encoder<S>::gate_weights(int task, double tem) const {
  check_task(task);
  if (!(tem > 0)) throw ConfigError("temperature must be positive");
  return sigmoid(cumsum(softplus(gates_[static_cast<std::size_t>(task)])) * static_cast<S>(1.0 / tem));
}

template <typename S>
std::vector<double> Encoder<S>::raw_gate(int task) const {
  check_task(task);
  const auto& v = gates_[static_cast<std::size_t>(task)].value();
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v[i]);
  return out;
}

template <typename S>
double Encoder<S>::routing_weight(int task, Index block, double tem) const {
  check_block(block);
  return tpseg::routing_weight(raw_gate(task), block, tem);
}

template <typename S>
Index Encoder<S>::split_position(int task, double tem) const {
  if (blocks() <= 2) return blocks();
  return tpseg::split_position(raw_gate(task), tem);
}

template <typename S>
Var<S> Encoder<S>::tcrb_forward(const Var<S>& h, int task, Index block, const Var<S>& w) const {
  const Var<S> ds = shared_increment(h, block);
  Var<S> mixed;
  if (!w.defined()) {
    mixed = h + ds;
  } else {
    const Var<S> dt = task_increment(h, task, block);
    mixed = h + scale(ds, w * S(-1) + S(1)) + scale(dt, w);
  }
  return frozen_[static_cast<std::size_t>(block)](mixed);
}

template <typename S>
EncoderTaps<S> Encoder<S>::forward(const Var<S>& image, int task, double tem) const {
  check_task(task);
  if (image.value().rank() != 4 || image.shape()[1] != 1) {
    throw ShapeError("encoder expects (N, 1, H, W) images, got " + to_string(image.shape()));
  }
  EncoderTaps<S> taps;
  taps.f0 = gelu(conv2d(image, stem_w_, stem_b_, 1, 1));
  Var<S> h = conv2d(taps.f0, patch_w_, patch_b_, 2, 0);
  Var<S> weights;
  if (mode_ == RouteMode::Full && blocks() > 2) weights = gate_weights(task, tem);
  const Var<S> one(Tensor<S>::scalar(S(1)));
  const Index stage2 = blocks() - stage1_blocks_;
  for (Index b = 0; b <= blocks(); ++b) {
    if (b == stage1_blocks_) {
      taps.e1 = h;
      h = conv2d(h, down_w_, down_b_, 2, 0);
    }
    if (b >= stage1_blocks_ && b - stage1_blocks_ == stage2 / 2) taps.e2a = h;
    if (b == blocks()) break;
    Var<S> w;
    if (b >= 2) {
      if (mode_ == RouteMode::Full) w = element(weights, b - 2);
      if (mode_ == RouteMode::TaskOnly) w = one;
    }
    h = tcrb_forward(h, task, b, w);
  }
  taps.e2b = h;
  return taps;
}

template <typename S>
Var<S>& Encoder<S>::gate(int task) {
  check_task(task);
  return gates_[static_cast<std::size_t>(task)];
}

template <typename S>
const Var<S>& Encoder<S>::gate(int task) const {
  check_task(task);
  return gates_[static_cast<std::size_t>(task)];
}

template <typename S>
void Encoder<S>::collect(ParamList<S>& out) const {
  out.push_back({"enc.stem.w", stem_w_, ParamRole::Frozen, -1});
  out.push_back({"enc.stem.b", stem_b_, ParamRole::Frozen, -1});
  out.push_back({"enc.patch.w", patch_w_, ParamRole::Frozen, -1});
  out.push_back({"enc.patch.b", patch_b_, ParamRole::Frozen, -1});
  out.push_back({"enc.down.w", down_w_, ParamRole::Frozen, -1});
  out.push_back({"enc.down.b", down_b_, ParamRole::Frozen, -1});
  for (std::size_t b = 0; b < frozen_.size(); ++b) {
    const std::string name = "enc.block" + std::to_string(b);
    frozen_[b].collect(out, name);
    shared_[b].collect(out, name + ".shared", ParamRole::SharedAdapter, -1);
  }
  for (int t = 0; t < tasks_; ++t) {
    for (std::size_t g = 0; g < task_[t].size(); ++g) {
      task_[t][g].collect(out, "enc.block" + std::to_string(g + 2) + ".task" + std::to_string(t), ParamRole::TaskRouter, t);
    }
    out.push_back({"enc.gate" + std::to_string(t), gates_[static_cast<std::size_t>(t)], ParamRole::Gate, t});
  }
}

template <typename S>
std::uint64_t Encoder<S>::frozen_checksum() const {
  ParamList<S> all;
  collect(all);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : all) {
    if (p.role != ParamRole::Frozen) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.var.size()) * sizeof(S); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename S>
std::string Encoder<S>::gate_json(double tem) const {
  nlohmann::json out = nlohmann::json::array();
  for (int t = 0; t < tasks_; ++t) {
    const auto raw = raw_gate(t);
    const auto w = routing_weights(raw, tem);
    nlohmann::json task;
    task["task"] = t;
    task["temperature"] = tem;
    task["split_position"] = split_position(t, tem);
    nlohmann::json rows = nlohmann::json::array();
    double c = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const double ell = softplus_d(raw[i]);
      c += ell;
      rows.push_back({{"block", i + 2}, {"raw_L", raw[i]}, {"l", ell}, {"cumsum", c}, {"w", w[i]}});
    }
    task["blocks"] = rows;
    out.push_back(task);
  }
  return out.dump(2);
}

template struct Router<float>;
template struct Router<double>;
template struct FrozenBlock<float>;
template struct FrozenBlock<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace tpseg
