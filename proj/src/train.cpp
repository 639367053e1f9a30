#include "tpseg/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "tpseg/ops.hpp"
#include "tpseg/serialize.hpp"

namespace tpseg {

using nlohmann::json;

// ---- Adam -------------------------------------------------------------------------

template <typename S>
Adam<S>::Adam(std::vector<std::pair<std::string, Var<S>>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [name, v] : params_) {
    if (!v.requires_grad()) throw ConfigError("optimizer given a constant: " + name);
    slots_[name] = {Tensor<double>::zeros(v.shape()), Tensor<double>::zeros(v.shape()), 0};
  }
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& [name, v] : params_) v.zero_grad();
}

template <typename S>
void Adam<S>::step() {
  const AdamOptions& o = options_;
  for (auto& [name, v] : params_) {
    if (!v.has_grad()) continue;
    Slot& s = slots_.at(name);
    const Tensor<S> g = v.grad();
    Tensor<S>& x = v.mutable_value();
    ++s.t;
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.t));
    for (Index i = 0; i < x.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + o.weight_decay * static_cast<double>(x[i]);
      s.m[i] = o.beta1 * s.m[i] + (1 - o.beta1) * gi;
      s.v[i] = o.beta2 * s.v[i] + (1 - o.beta2) * gi * gi;
      x[i] -= static_cast<S>(o.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + o.eps));
    }
  }
}

// ---- batches and evaluation ----------------------------------------------------------

template <typename S>
std::pair<Tensor<S>, Tensor<S>> stack_batch(const std::vector<const SegmentationSample*>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  const Index H = batch[0]->image.dim(0), W = batch[0]->image.dim(1);
  const auto N = static_cast<Index>(batch.size());
  Tensor<S> x({N, 1, H, W}), y({N, 1, H, W});
  for (Index n = 0; n < N; ++n) {
    const auto& s = *batch[static_cast<std::size_t>(n)];
    if (s.image.shape() != Shape{H, W} || s.mask.shape() != Shape{H, W}) {
      throw ShapeError("batch mixes sizes: " + to_string(s.image.shape()) + " vs " + to_string(Shape{H, W}));
    }
    x.values().segment(n * H * W, H * W) = s.image.values().template cast<S>();
    y.values().segment(n * H * W, H * W) = s.mask.values().template cast<S>();
  }
  return {std::move(x), std::move(y)};
}

template <typename S>
TaskMetrics evaluate(const TpSeg<S>& model, const std::vector<SegmentationSample>& samples, int task, double tem,
                     int batch_size) {
  if (task < 0 || task >= model.tasks()) {
    throw TaskError("unknown task " + std::to_string(task) + " (model has " + std::to_string(model.tasks()) + ")");
  }
  if (samples.empty()) throw ConfigError("empty evaluation split for task " + std::to_string(task));
  NoGradScope no_grad;
  TaskMetrics m;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<const SegmentationSample*> chunk;
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      chunk.push_back(&samples[i]);
    }
    const auto [x, y] = stack_batch<S>(chunk);
    const Tensor<double> pred = binarize_logits(model.forward(x, task, tem).logits.front().value());
    const Index P = x.size() / x.dim(0);
    for (Index n = 0; n < x.dim(0); ++n) {
      const Tensor<double> p(Shape{P}, pred.values().segment(n * P, P));
      const Tensor<double> g(Shape{P}, y.values().segment(n * P, P).template cast<double>());
      const Confusion c = confusion(p, g);
      m.dice += dice(c);
      m.miou += miou(c);
    }
  }
  m.samples = static_cast<long>(samples.size());
  m.dice /= static_cast<double>(m.samples);
  m.miou /= static_cast<double>(m.samples);
  return m;
}

// ---- Trainer -----------------------------------------------------------------------

namespace {

template <typename S>
std::vector<std::pair<std::string, Var<S>>> trainable(const TpSeg<S>& model) {
  std::vector<std::pair<std::string, Var<S>>> out;
  for (const auto& p : model.parameters()) {
    if (p.role != ParamRole::Frozen) out.emplace_back(p.name, p.var);
  }
  return out;
}

int default_steps(const TrainConfig& t, const MultiTaskData& data) {
  if (t.steps_per_epoch > 0) return t.steps_per_epoch;
  long n = 0;
  for (long c : data.train_counts()) n += c;
  return static_cast<int>(std::max(1L, n / std::max(1, t.batch_size)));
}

}  // namespace

template <typename S>
Trainer<S>::Trainer(const ModelConfig& model, const TrainConfig& train, const MultiTaskData& data)
    : train_(train), data_(&data), model_(model),
      adam_(trainable(model_), {train.lr, train.beta1, train.beta2, train.adam_eps, train.weight_decay}),
      sampler_(data.train_counts(), derive_seed(train.seed, 0x73616d706c6572ULL)),
      steps_per_epoch_(default_steps(train, data)) {
  if (data.tasks() != model.tasks) {
    throw ConfigError("data has " + std::to_string(data.tasks()) + " tasks, model " + std::to_string(model.tasks));
  }
  if (data.size != model.image_size) {
    throw ConfigError("data size " + std::to_string(data.size) + " differs from model image_size " +
                      std::to_string(model.image_size));
  }
  schedule_.total_steps = train.temperature_steps > 0 ? train.temperature_steps
                                                      : static_cast<long>(train.epochs) * steps_per_epoch_;
}

template <typename S>
double Trainer<S>::temperature() const {
  return schedule_(step_);
}

template <typename S>
double Trainer<S>::train_step(std::vector<double>* level_loss) {
  const double tem = temperature();
  const auto refs = sampler_.draw(train_.batch_size);
  const double B = static_cast<double>(refs.size());
  std::vector<std::vector<const SegmentationSample*>> groups(static_cast<std::size_t>(model_.tasks()));
  for (const auto& r : refs) {
    groups[static_cast<std::size_t>(r.task)].push_back(
        &data_->train[static_cast<std::size_t>(r.task)][static_cast<std::size_t>(r.index)]);
  }

  adam_.zero_grad();
  double total = 0;
  std::vector<double> levels(static_cast<std::size_t>(model_.config().levels), 0.0);
  struct Pending {
    int task;
    ModelOutput<S> out;
    Tensor<S> masks;
  };
  std::vector<Pending> pending;
  for (int t = 0; t < model_.tasks(); ++t) {
    const auto& group = groups[static_cast<std::size_t>(t)];
    if (group.empty()) continue;
    const double share = static_cast<double>(group.size()) / B;
    auto [x, y] = stack_batch<S>(group);
    GradTape<S> tape;
    ModelOutput<S> out = model_.forward(x, t, tem);
    const Var<S> loss = seg_loss(out.logits, y, train_.dice_weight, train_.bce_weight) * static_cast<S>(share);
    const auto terms = level_losses(out.logits, y, train_.dice_weight, train_.bce_weight);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      dump_diagnostics(t, terms);
      throw NumericError("non-finite loss at step " + std::to_string(step_) + " on task " + std::to_string(t));
    }
    tape.backward(loss);
    total += static_cast<double>(loss.item());
    for (std::size_t k = 0; k < levels.size(); ++k) levels[k] += share * terms[k];
    // keep only what the EMA needs
    ModelOutput<S> keep;
    for (const auto& l : out.levels) {
      LevelOutput<S> lo;
      lo.fused = Var<S>(l.fused.value());
      keep.levels.push_back(std::move(lo));
    }
    pending.push_back({t, std::move(keep), std::move(y)});
  }
  adam_.step();
  if (train_.update_prototypes) {
    for (const auto& p : pending) model_.update_prototypes(p.task, p.out, p.masks);
  }
  ++step_;
  if (level_loss) *level_loss = std::move(levels);
  return total;
}

template <typename S>
MetricsRecord Trainer<S>::validate() const {
  MetricsRecord r;
  for (int t = 0; t < model_.tasks(); ++t) {
    r.tasks.push_back(evaluate(model_, data_->val[static_cast<std::size_t>(t)], t, temperature()));
  }
  r.temperature = temperature();
  r.step = step_;
  r.epoch = epoch_;
  return r;
}

template <typename S>
MetricsRecord Trainer<S>::train_epoch() {
  double loss = 0;
  std::vector<double> levels(static_cast<std::size_t>(model_.config().levels), 0.0), terms;
  for (int s = 0; s < steps_per_epoch_; ++s) {
    loss += train_step(&terms);
    for (std::size_t k = 0; k < levels.size(); ++k) levels[k] += terms[k];
  }
  ++epoch_;
  MetricsRecord r = validate();
  r.train_loss = loss / steps_per_epoch_;
  for (auto& l : levels) l /= steps_per_epoch_;
  r.level_loss = std::move(levels);
  history_.push_back(r);
  return r;
}

template <typename S>
void Trainer<S>::fit(const std::function<void(const MetricsRecord&)>& on_epoch) {
  while (epoch_ < train_.epochs) {
    const MetricsRecord r = train_epoch();
    if (on_epoch) on_epoch(r);
  }
}

template <typename S>
void Trainer<S>::dump_diagnostics(int task, const std::vector<double>& terms) const {
  if (diagnostics_dir.empty()) return;
  json j;
  j["step"] = step_;
  j["epoch"] = epoch_;
  j["task"] = task;
  j["temperature"] = temperature();
  j["level_loss"] = json::array();
  for (double t : terms) j["level_loss"].push_back(std::isfinite(t) ? json(t) : json(std::to_string(t)));
  for (const auto& p : model_.parameters()) {
    const auto& v = p.var.value().values();
    const bool finite = v.allFinite();
    j["parameters"][p.name] = {{"norm", finite ? json(static_cast<double>(v.norm())) : json("non-finite")},
                               {"finite", finite}};
  }
  std::filesystem::create_directories(diagnostics_dir);
  std::ofstream(std::filesystem::path(diagnostics_dir) / "diagnostics.json") << j.dump(2);
}

template <typename S>
void Trainer<S>::save(const std::string& path, const RunConfig& run) const {
  Checkpoint ck;
  ck.config = run;
  ck.config_hash = run.hash();
  ck.step = step_;
  ck.epoch = epoch_;
  ck.temperature = temperature();
  ck.sampler_state = sampler_.state();
  ck.history = history_;
  store_model(model_, ck);
  for (const auto& [name, slot] : adam_.state()) {
    ck.tensors["adam.m." + name] = slot.m;
    ck.tensors["adam.v." + name] = slot.v;
    ck.counters["adam.t." + name] = slot.t;
  }
  ck.write(path);
}

template <typename S>
void Trainer<S>::load_state(const std::string& path) {
  const Checkpoint ck = Checkpoint::read(path);
  restore_model(model_, ck);
  for (auto& [name, slot] : adam_.state()) {
    const auto m = ck.tensors.find("adam.m." + name), v = ck.tensors.find("adam.v." + name);
    const auto t = ck.counters.find("adam.t." + name);
    if (m == ck.tensors.end() || v == ck.tensors.end() || t == ck.counters.end()) {
      throw IoError(path, "missing optimizer state for " + name);
    }
    slot = {m->second, v->second, t->second};
  }
  sampler_.set_state(ck.sampler_state);
  step_ = ck.step;
  epoch_ = ck.epoch;
  history_ = ck.history;
}

// ---- checkpoint file ------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

json record_json(const MetricsRecord& r) {
  json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"level_loss", r.level_loss},
            {"temperature", r.temperature}, {"step", r.step}};
  j["tasks"] = json::array();
  for (const auto& t : r.tasks) j["tasks"].push_back({{"dice", t.dice}, {"miou", t.miou}, {"samples", t.samples}});
  return j;
}

MetricsRecord record_from(const json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch");
  r.train_loss = j.at("train_loss");
  r.level_loss = j.at("level_loss").get<std::vector<double>>();
  r.temperature = j.at("temperature");
  r.step = j.at("step");
  for (const auto& t : j.at("tasks")) r.tasks.push_back({t.at("dice"), t.at("miou"), t.at("samples")});
  return r;
}

std::string proto_name(int task, int level, const char* half) {
  return "proto.task" + std::to_string(task) + ".level" + std::to_string(level) + "." + half;
}

}  // namespace

void Checkpoint::write(const std::string& path) const {
  json h;
  h["config"] = json::parse(config.to_json());
  h["config_hash"] = config_hash;
  h["step"] = step;
  h["epoch"] = epoch;
  h["temperature"] = temperature;
  h["sampler_state"] = sampler_state;
  h["counters"] = counters;
  h["history"] = json::array();
  for (const auto& r : history) h["history"].push_back(record_json(r));
  const std::string header = h.dump();

  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(kMagic, 4);
    le::put_u32(out, kVersion);
    le::put_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    le::put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
      le::put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(out, t);
    }
    if (!out) throw IoError(path, "write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  try {
    in.exceptions(std::ios::failbit | std::ios::badbit);
    char magic[4];
    in.read(magic, 4);
    if (std::string(magic, 4) != std::string(kMagic, 4)) throw IoError(path, "not a checkpoint (bad magic)");
    const std::uint32_t version = le::get_u32(in);
    if (version != kVersion) throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t len = le::get_u64(in);
    if (len > (1ULL << 30)) throw IoError(path, "corrupt header length");
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    const json h = json::parse(header);

    Checkpoint ck;
    ck.config = RunConfig::from_json(h.at("config").dump());
    ck.config_hash = h.at("config_hash");
    if (ck.config_hash != ck.config.hash()) throw IoError(path, "config hash does not match the stored config");
    ck.step = h.at("step");
    ck.epoch = h.at("epoch");
    ck.temperature = h.at("temperature");
    ck.sampler_state = h.at("sampler_state");
    ck.counters = h.at("counters").get<std::map<std::string, long>>();
    for (const auto& r : h.at("history")) ck.history.push_back(record_from(r));

    const std::uint64_t count = le::get_u64(in);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint32_t n = le::get_u32(in);
      if (n > 4096) throw IoError(path, "corrupt record name");
      std::string name(n, '\0');
      in.read(name.data(), n);
      ck.tensors[name] = read_tensor(in);
    }
    return ck;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path, std::string("corrupt checkpoint: ") + e.what());
  }
}

template <typename S>
void store_model(const TpSeg<S>& model, Checkpoint& ck) {
  for (const auto& p : model.parameters()) ck.tensors[p.name] = p.var.value().template cast<double>();
  const PrototypeBank& bank = model.bank();
  for (int t = 0; t < bank.tasks(); ++t) {
    for (int k = 0; k < bank.levels(); ++k) {
      const PrototypePair& pair = bank.pair(t, k);
      ck.tensors[proto_name(t, k, "fg")] = pair.fg;
      ck.tensors[proto_name(t, k, "bg")] = pair.bg;
      ck.counters[proto_name(t, k, "updates")] = pair.update_count;
    }
  }
}

template <typename S>
void restore_model(TpSeg<S>& model, const Checkpoint& ck) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<double>& {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw ConfigError("checkpoint lacks record " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("checkpoint record " + name + " has shape " + to_string(it->second.shape()) + ", model expects " +
                       to_string(shape));
    }
    return it->second;
  };
  for (auto& p : model.parameters()) {
    Var<S> v = p.var;
    v.mutable_value() = fetch(p.name, v.shape()).template cast<S>();
  }
  PrototypeBank& bank = model.bank();
  for (int t = 0; t < bank.tasks(); ++t) {
    for (int k = 0; k < bank.levels(); ++k) {
      PrototypePair& pair = bank.pair(t, k);
      pair.fg = fetch(proto_name(t, k, "fg"), pair.fg.shape());
      pair.bg = fetch(proto_name(t, k, "bg"), pair.bg.shape());
      const auto it = ck.counters.find(proto_name(t, k, "updates"));
      pair.update_count = it == ck.counters.end() ? 0 : it->second;
    }
  }
}

template <typename S>
TpSeg<S> load_model(const Checkpoint& ck) {
  TpSeg<S> model(ck.config.model);
  restore_model(model, ck);
  return model;
}

#define TPSEG_INSTANTIATE_TRAIN(S)                                                                       \
  template class Adam<S>;                                                                               \
  template class Trainer<S>;                                                                            \
  template std::pair<Tensor<S>, Tensor<S>> stack_batch(const std::vector<const SegmentationSample*>&);  \
  template TaskMetrics evaluate(const TpSeg<S>&, const std::vector<SegmentationSample>&, int, double, int); \
  template void store_model(const TpSeg<S>&, Checkpoint&);                                               \
  template void restore_model(TpSeg<S>&, const Checkpoint&);                                             \
  template TpSeg<S> load_model(const Checkpoint&);

TPSEG_INSTANTIATE_TRAIN(float)
TPSEG_INSTANTIATE_TRAIN(double)

}  // namespace tpseg
