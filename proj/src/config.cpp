#include "tpseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace tpseg {

using nlohmann::json;

std::string to_string(RouteMode mode) {
  switch (mode) {
    case RouteMode::Full: return "full";
    case RouteMode::SharedOnly: return "shared_only";
    case RouteMode::TaskOnly: return "task_only";
  }
  return "full";
}

RouteMode parse_route_mode(const std::string& text) {
  if (text == "full") return RouteMode::Full;
  if (text == "shared_only") return RouteMode::SharedOnly;
  if (text == "task_only") return RouteMode::TaskOnly;
  throw ConfigError("route_mode must be full, shared_only or task_only, got '" + text + "'");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model: " + what);
  };
  require(tasks > 0, "tasks must be positive");
  require(blocks >= 1 && stage1_blocks >= 0 && stage1_blocks <= blocks, "block counts inconsistent");
  require(image_size > 0 && image_size % 4 == 0, "image_size must be a positive multiple of 4");
  const Index s1 = image_size / 2, s2 = image_size / 4;
  require(stage1_window > 0 && s1 % stage1_window == 0, "stage1_window must divide " + std::to_string(s1));
  require(stage2_window > 0 && s2 % stage2_window == 0, "stage2_window must divide " + std::to_string(s2));
  require(adapter_reduction > 0 && stage1_channels / adapter_reduction > 0 && stage2_channels / adapter_reduction > 0,
          "adapter_reduction too large");
  require(stage1_channels % adapter_groups == 0 && stage2_channels % adapter_groups == 0,
          "adapter_groups must divide the encoder widths");
  require(levels >= 1 && levels <= 3, "levels must be 1, 2 or 3");
  require(static_cast<int>(fuse_channels.size()) >= levels, "fuse_channels needs one entry per level");
  for (int l = 0; l < levels; ++l) {
    require(fuse_channels[static_cast<std::size_t>(l)] % decoder_groups == 0, "decoder_groups must divide fuse_channels");
  }
  require(experts >= 1, "experts must be positive");
  require(temp_r > 0, "temp_r must be positive");
  require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
  require(embedding_dim > 0 && init_hidden > 0 && descriptor_dim > 0, "hidden sizes must be positive");
}

namespace {

template <class F> void fields(ModelConfig& c, F&& f) {
  f("tasks", c.tasks);
  f("image_size", c.image_size);
  f("stem_channels", c.stem_channels);
  f("stage1_channels", c.stage1_channels);
  f("stage2_channels", c.stage2_channels);
  f("blocks", c.blocks);
  f("stage1_blocks", c.stage1_blocks);
  f("stage1_window", c.stage1_window);
  f("stage2_window", c.stage2_window);
  f("mlp_ratio", c.mlp_ratio);
  f("adapter_reduction", c.adapter_reduction);
  f("adapter_groups", c.adapter_groups);
  f("gate_init", c.gate_init);
  f("levels", c.levels);
  f("fuse_channels", c.fuse_channels);
  f("decoder_groups", c.decoder_groups);
  f("descriptor_dim", c.descriptor_dim);
  f("experts", c.experts);
  f("alpha", c.alpha);
  f("lambda_p", c.lambda_p);
  f("temp_r", c.temp_r);
  f("learned_kv", c.learned_kv);
  f("rho_init", c.rho_init);
  f("embedding_dim", c.embedding_dim);
  f("init_hidden", c.init_hidden);
  f("momentum", c.momentum);
  f("proto_eps", c.proto_eps);
  f("seed", c.seed);
}

template <class F> void fields(TrainConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("adam_eps", c.adam_eps);
  f("weight_decay", c.weight_decay);
  f("dice_weight", c.dice_weight);
  f("bce_weight", c.bce_weight);
  f("steps_per_epoch", c.steps_per_epoch);
  f("temperature_steps", c.temperature_steps);
  f("precision", c.precision);
  f("seed", c.seed);
  f("update_prototypes", c.update_prototypes);
  f("verbose", c.verbose);
}

template <class F> void fields(DataConfig& c, F&& f) {
  f("tasks", c.tasks);
  f("size", c.size);
  f("train", c.train);
  f("val", c.val);
  f("noise", c.noise);
  f("seed", c.seed);
}

struct Reader {
  const json& j;
  std::string section;
  std::set<std::string> known;

  template <class T> void operator()(const char* key, T& field) {
    known.insert(key);
    if (j.contains(key)) field = j.at(key).get<T>();
  }

  void finish() const {
    for (const auto& item : j.items()) {
      if (!known.count(item.key())) throw ConfigError("unknown config key '" + section + item.key() + "'");
    }
  }
};

template <class C> void read_section(const json& root, const char* name, C& out, const std::vector<std::string>& extra = {}) {
  if (!root.contains(name)) return;
  const json& j = root.at(name);
  if (!j.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
  Reader r{j, std::string(name) + ".", {}};
  fields(out, r);
  for (const auto& k : extra) r.known.insert(k);
  r.finish();
}

template <class C> json write_section(const C& in) {
  json j = json::object();
  C copy = in;
  fields(copy, [&](const char* key, auto& field) { j[key] = field; });
  return j;
}

}  // namespace

std::string RunConfig::to_json() const {
  json j;
  j["model"] = write_section(model);
  j["model"]["route_mode"] = tpseg::to_string(model.route_mode);
  j["train"] = write_section(train);
  j["data"] = write_section(data);
  j["out"] = out;
  j["data_dir"] = data_dir;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig c;
  try {
    const json root = json::parse(text);
    if (!root.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& item : root.items()) {
      static const std::set<std::string> top{"model", "train", "data", "out", "data_dir"};
      if (!top.count(item.key())) throw ConfigError("unknown config key '" + item.key() + "'");
    }
    read_section(root, "model", c.model, {"route_mode"});
    if (root.contains("model") && root["model"].contains("route_mode")) {
      c.model.route_mode = parse_route_mode(root["model"]["route_mode"].get<std::string>());
    }
    read_section(root, "train", c.train);
    read_section(root, "data", c.data);
    if (root.contains("out")) c.out = root["out"].get<std::string>();
    if (root.contains("data_dir")) c.data_dir = root["data_dir"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.train.precision != "float" && c.train.precision != "double") {
    throw ConfigError("train.precision must be float or double");
  }
  if (c.train.epochs < 0 || c.train.batch_size <= 0) throw ConfigError("train: epochs >= 0 and batch_size > 0 required");
  if (c.data.tasks != c.model.tasks) throw ConfigError("data.tasks must equal model.tasks");
  if (c.data.size != c.model.image_size) throw ConfigError("data.size must equal model.image_size");
  c.model.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t RunConfig::hash() const {
  json j = json::parse(to_json());
  // verbosity does not change results
  j["train"].erase("verbose");
  return fnv1a64(j.dump());
}

}  // namespace tpseg
