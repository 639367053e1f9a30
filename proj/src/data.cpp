#include "tpseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "tpseg/rng.hpp"

namespace tpseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::BrightEllipse: return "bright_ellipse";
    case GeneratorKind::DarkBlob: return "dark_blob";
    case GeneratorKind::Ring: return "ring";
    case GeneratorKind::MultiDot: return "multi_dot";
  }
  return "bright_ellipse";
}

GeneratorKind parse_generator_kind(const std::string& text) {
  for (int k = 0; k < 4; ++k) {
    if (to_string(static_cast<GeneratorKind>(k)) == text) return static_cast<GeneratorKind>(k);
  }
  throw ConfigError("unknown generator kind '" + text + "'");
}

std::vector<TaskSpec> default_task_specs(int tasks, int count, double noise) {
  std::vector<TaskSpec> specs;
  for (int t = 0; t < tasks; ++t) specs.push_back({t, static_cast<GeneratorKind>(t % 4), noise, count});
  return specs;
}

namespace {

struct Canvas {
  Index n;
  std::vector<double> img, mask;

  explicit Canvas(Index size) : n(size), img(static_cast<std::size_t>(size * size)), mask(img.size()) {}

  template <class Inside>
  void paint(Inside inside, double value, bool target) {
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) {
        if (!inside(x + 0.5, y + 0.5)) continue;
        img[static_cast<std::size_t>(y * n + x)] = value;
        if (target) mask[static_cast<std::size_t>(y * n + x)] = 1.0;
      }
  }

  template <class Inside, class Value>
  void paint_fn(Inside inside, Value value, bool target) {
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) {
        if (!inside(x + 0.5, y + 0.5)) continue;
        img[static_cast<std::size_t>(y * n + x)] = value(x + 0.5, y + 0.5);
        if (target) mask[static_cast<std::size_t>(y * n + x)] = 1.0;
      }
  }
};

struct Ellipse {
  double cx, cy, a, b, theta;
  bool operator()(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double v = -dx * std::sin(theta) + dy * std::cos(theta);
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
  double extent() const { return std::max(a, b); }
};

struct Blob {
  double cx, cy, r0, amp, phase;
  int lobes;
  bool operator()(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double r = r0 * (1.0 + amp * std::sin(lobes * std::atan2(dy, dx) + phase));
    return dx * dx + dy * dy <= r * r;
  }
  double extent() const { return r0 * (1.0 + amp); }
};

struct Disc {
  double cx, cy, r;
  bool operator()(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; }
};

void background(Canvas& c, SplitMix64& rng, double base) {
  const double level = base + rng.uniform(-0.05, 0.05);
  const double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double slope = rng.uniform(0, 0.05) / static_cast<double>(c.n);
  for (Index y = 0; y < c.n; ++y)
    for (Index x = 0; x < c.n; ++x) {
      const double t = (x - c.n / 2.0) * std::cos(angle) + (y - c.n / 2.0) * std::sin(angle);
      c.img[static_cast<std::size_t>(y * c.n + x)] = level + slope * t;
    }
}

double centre(SplitMix64& rng, double size, double margin) {
  return margin >= size - margin ? size / 2 : rng.uniform(margin, size - margin);
}

// two to four objects per polarity family; the target is one family
void conflict_scene(Canvas& c, SplitMix64& rng, double s, bool bright_is_target) {
  background(c, rng, 0.5);
  const double n = static_cast<double>(c.n);
  const int count = 3 + static_cast<int>(rng.below(2));
  struct Placed {
    double cx, cy, r;
  };
  std::vector<Placed> placed;
  for (int k = 0; k < count; ++k) {
    const bool bright = k == 0 || (k > 1 && rng.uniform() < 0.5);
    Ellipse e{0, 0, rng.uniform(4, 10) * s, rng.uniform(4, 10) * s, rng.uniform(0, std::numbers::pi)};
    Blob b{0, 0, rng.uniform(5, 9) * s, 0.2, rng.uniform(0, 2 * std::numbers::pi), 2 + static_cast<int>(rng.below(3))};
    const double r = bright ? e.extent() : b.extent();
    double cx = 0, cy = 0;
    bool clear = false;
    for (int attempt = 0; attempt < 100 && !clear; ++attempt) {
      cx = centre(rng, n, r + 1);
      cy = centre(rng, n, r + 1);
      clear = true;
      for (const auto& o : placed) clear = clear && std::hypot(cx - o.cx, cy - o.cy) > r + o.r + 2 * s;
    }
    // the first two always land; extras are dropped when the canvas is full
    if (!clear && k > 1) continue;
    placed.push_back({cx, cy, r});
    const double contrast = rng.uniform(0.25, 0.35);
    if (bright) {
      e.cx = cx;
      e.cy = cy;
      c.paint(e, 0.5 + contrast, bright_is_target);
    } else {
      b.cx = cx;
      b.cy = cy;
      c.paint(b, 0.5 - contrast, !bright_is_target);
    }
  }
}

// striped ring next to a flat distractor disc
void ring_scene(Canvas& c, SplitMix64& rng, double s) {
  background(c, rng, 0.3);
  const double n = static_cast<double>(c.n);
  const double outer = rng.uniform(10, 18) * s;
  const double inner = std::max(outer - rng.uniform(3, 6) * s, 0.0);
  const double cx = centre(rng, n, outer + 1);
  const double cy = centre(rng, n, outer + 1);
  const double phi = rng.uniform(0, std::numbers::pi);
  const double period = 4 * std::max(s, 0.5);
  const double mid = 0.55 + rng.uniform(-0.03, 0.03);
  c.paint_fn(
      [&](double x, double y) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        return d2 <= outer * outer && d2 >= inner * inner;
      },
      [&](double x, double y) {
        const double t = (x * std::cos(phi) + y * std::sin(phi)) / period;
        return t - std::floor(t) < 0.5 ? mid + 0.2 : mid - 0.2;
      },
      true);
  Disc d{0, 0, rng.uniform(4, 7) * s};
  for (int attempt = 0; attempt < 100; ++attempt) {
    d.cx = centre(rng, n, d.r + 1);
    d.cy = centre(rng, n, d.r + 1);
    if (std::hypot(d.cx - cx, d.cy - cy) > outer + d.r + 2 * s) {
      c.paint(d, 0.75 + rng.uniform(-0.03, 0.03), false);
      break;
    }
  }
}

// speckled dots
void dots_scene(Canvas& c, SplitMix64& rng, double s) {
  background(c, rng, 0.15);
  const double n = static_cast<double>(c.n);
  const int count = 3 + static_cast<int>(rng.below(4));
  std::vector<Disc> placed;
  for (int k = 0; k < count; ++k) {
    Disc d{0, 0, rng.uniform(2, 4) * s};
    for (int attempt = 0; attempt < 100; ++attempt) {
      d.cx = centre(rng, n, d.r + 1);
      d.cy = centre(rng, n, d.r + 1);
      bool clear = true;
      for (const auto& o : placed) clear = clear && std::hypot(d.cx - o.cx, d.cy - o.cy) > d.r + o.r + 2 * s;
      if (clear) break;
    }
    placed.push_back(d);
    const double level = 0.6 + rng.uniform(-0.03, 0.03);
    c.paint_fn(d, [&](double, double) { return level + (rng.uniform() < 0.5 ? 0.25 : -0.25); }, true);
  }
}

}  // namespace

SegmentationSample generate_sample(const TaskSpec& spec, Index size, std::uint64_t seed) {
  if (size <= 0) throw ConfigError("image size must be positive");
  SplitMix64 rng(seed);
  Canvas c(size);
  const double s = static_cast<double>(size) / 64.0;
  switch (spec.kind) {
    case GeneratorKind::BrightEllipse: conflict_scene(c, rng, s, true); break;
    case GeneratorKind::DarkBlob: conflict_scene(c, rng, s, false); break;
    case GeneratorKind::Ring: ring_scene(c, rng, s); break;
    case GeneratorKind::MultiDot: dots_scene(c, rng, s); break;
  }
  bool any = false;
  for (double m : c.mask) any = any || m > 0;
  if (!any) {
    // shapes below one pixel at tiny sizes: mark the centre pixel
    const auto mid = static_cast<std::size_t>((size / 2) * size + size / 2);
    c.mask[mid] = 1.0;
    c.img[mid] = spec.kind == GeneratorKind::DarkBlob ? 0.1 : 0.9;
  }
  SegmentationSample out;
  out.image = Tensor<double>({size, size});
  out.mask = Tensor<double>({size, size});
  for (std::size_t i = 0; i < c.img.size(); ++i) {
    out.image[static_cast<Index>(i)] = std::clamp(c.img[i] + spec.noise * rng.normal(), 0.0, 1.0);
    out.mask[static_cast<Index>(i)] = c.mask[i];
  }
  out.task_id = spec.task_id;
  return out;
}

std::vector<SegmentationSample> gen_task_dataset(const TaskSpec& spec, Index size, std::uint64_t seed, int threads) {
  if (spec.count <= 0) throw ConfigError("task " + std::to_string(spec.task_id) + ": count must be positive");
  std::vector<SegmentationSample> out(static_cast<std::size_t>(spec.count));
  const std::uint64_t task_seed = derive_seed(seed, static_cast<std::uint64_t>(spec.task_id));
  auto work = [&](int first, int stride) {
    for (int i = first; i < spec.count; i += stride) {
      auto& s = out[static_cast<std::size_t>(i)];
      s = generate_sample(spec, size, derive_seed(task_seed, static_cast<std::uint64_t>(i)));
      char id[32];
      std::snprintf(id, sizeof id, "t%d_%05d", spec.task_id, i);
      s.sample_id = id;
    }
  };
  threads = std::max(1, std::min(threads, spec.count));
  std::vector<std::thread> pool;
  for (int k = 1; k < threads; ++k) pool.emplace_back(work, k, threads);
  work(0, threads);
  for (auto& t : pool) t.join();
  return out;
}

std::vector<long> MultiTaskData::train_counts() const {
  std::vector<long> counts;
  for (const auto& t : train) counts.push_back(static_cast<long>(t.size()));
  return counts;
}

MultiTaskData generate_data(const DataConfig& config, int threads) {
  if (config.tasks <= 0 || config.size <= 0 || config.train <= 0 || config.val < 0) {
    throw ConfigError("data: tasks, size and train must be positive, val non-negative");
  }
  MultiTaskData data;
  data.size = config.size;
  data.specs = default_task_specs(config.tasks, config.train + config.val, config.noise);
  for (const auto& spec : data.specs) {
    auto all = gen_task_dataset(spec, config.size, config.seed, threads);
    data.val.emplace_back(std::make_move_iterator(all.begin() + config.train), std::make_move_iterator(all.end()));
    all.resize(static_cast<std::size_t>(config.train));
    data.train.push_back(std::move(all));
  }
  return data;
}

// ---- PGM ---------------------------------------------------------------------------

void write_pgm(const std::string& path, const Tensor<double>& image) {
  if (image.rank() != 2) throw ShapeError("write_pgm expects (H, W), got " + to_string(image.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::string bytes(static_cast<std::size_t>(image.size()), '\0');
  for (Index i = 0; i < image.size(); ++i) {
    bytes[static_cast<std::size_t>(i)] = static_cast<char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

Tensor<double> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  auto token = [&]() {
    std::string t;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    return t;
  };
  if (token() != "P5") throw IoError(path, "not a binary PGM (P5)");
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw IoError(path, "corrupt PGM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path, "unsupported PGM geometry or depth");
  std::string bytes(static_cast<std::size_t>(w * h), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError(path, "truncated PGM payload");
  Tensor<double> t({h, w});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]) / 255.0;
  return t;
}

// ---- dataset directory ---------------------------------------------------------------

void save_dataset(const std::string& root, const MultiTaskData& data) {
  json manifest;
  manifest["format"] = "tpseg-dataset";
  manifest["version"] = 1;
  manifest["size"] = data.size;
  manifest["tasks"] = json::array();
  for (const auto& s : data.specs) {
    manifest["tasks"].push_back({{"task_id", s.task_id}, {"kind", to_string(s.kind)}, {"noise", s.noise}, {"count", s.count}});
  }
  manifest["samples"] = json::array();
  for (int t = 0; t < data.tasks(); ++t) {
    for (const char* split : {"train", "val"}) {
      const auto& list = std::string(split) == "train" ? data.train[static_cast<std::size_t>(t)] : data.val[static_cast<std::size_t>(t)];
      const fs::path dir = fs::path("data") / ("task" + std::to_string(t)) / split;
      std::error_code ec;
      fs::create_directories(fs::path(root) / dir, ec);
      if (ec) throw IoError((fs::path(root) / dir).string(), "cannot create directory: " + ec.message());
      for (const auto& s : list) {
        const std::string img = (dir / (s.sample_id + ".img.pgm")).generic_string();
        const std::string mask = (dir / (s.sample_id + ".mask.pgm")).generic_string();
        write_pgm((fs::path(root) / img).string(), s.image);
        write_pgm((fs::path(root) / mask).string(), s.mask);
        manifest["samples"].push_back(
            {{"sample_id", s.sample_id}, {"image", img}, {"mask", mask}, {"task_id", s.task_id}, {"split", split}});
      }
    }
  }
  const std::string path = (fs::path(root) / "manifest.json").string();
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  out << manifest.dump(1) << '\n';
}

MultiTaskData load_dataset(const std::string& root) {
  const std::string path = (fs::path(root) / "manifest.json").string();
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open manifest");
  MultiTaskData data;
  try {
    const json manifest = json::parse(in);
    data.size = manifest.at("size").get<Index>();
    std::map<int, std::size_t> slot;
    for (const auto& t : manifest.at("tasks")) {
      TaskSpec spec{t.at("task_id").get<int>(), parse_generator_kind(t.at("kind").get<std::string>()),
                    t.at("noise").get<double>(), t.at("count").get<int>()};
      slot[spec.task_id] = data.specs.size();
      data.specs.push_back(spec);
    }
    data.train.resize(data.specs.size());
    data.val.resize(data.specs.size());
    for (const auto& s : manifest.at("samples")) {
      const int task = s.at("task_id").get<int>();
      if (!slot.count(task)) throw IoError(path, "sample with unknown task_id " + std::to_string(task));
      SegmentationSample sample;
      sample.task_id = task;
      sample.sample_id = s.at("sample_id").get<std::string>();
      sample.image = read_pgm((fs::path(root) / s.at("image").get<std::string>()).string());
      sample.mask = read_pgm((fs::path(root) / s.at("mask").get<std::string>()).string());
      if (sample.image.shape() != Shape{data.size, data.size} || sample.mask.shape() != sample.image.shape()) {
        throw IoError(path, "sample " + sample.sample_id + " has the wrong extents");
      }
      for (Index i = 0; i < sample.mask.size(); ++i) sample.mask[i] = sample.mask[i] > 0.5 ? 1.0 : 0.0;
      const std::string split = s.at("split").get<std::string>();
      if (split == "train") {
        data.train[slot[task]].push_back(std::move(sample));
      } else if (split == "val") {
        data.val[slot[task]].push_back(std::move(sample));
      } else {
        throw IoError(path, "unknown split '" + split + "'");
      }
    }
  } catch (const json::exception& e) {
    throw IoError(path, std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(path, e.what());
  }
  return data;
}

Tensor<double> downsample_mask(const Tensor<double>& mask, Index height, Index width, MaskResample mode) {
  if (mask.rank() < 2) throw ShapeError("downsample_mask needs at least two axes, got " + to_string(mask.shape()));
  const Index H = mask.dim(mask.rank() - 2), W = mask.dim(mask.rank() - 1);
  if (height <= 0 || width <= 0 || height > H || width > W) {
    throw ShapeError("downsample_mask: target " + std::to_string(height) + "x" + std::to_string(width) +
                     " not within source " + to_string(mask.shape()));
  }
  Shape shape = mask.shape();
  shape[shape.size() - 2] = height;
  shape[shape.size() - 1] = width;
  Tensor<double> out(shape);
  const Index planes = mask.size() / (H * W);
  for (Index p = 0; p < planes; ++p)
    for (Index i = 0; i < height; ++i)
      for (Index j = 0; j < width; ++j) {
        double v;
        if (mode == MaskResample::Nearest) {
          v = mask[p * H * W + (i * H / height) * W + j * W / width];
        } else {
          const Index r0 = i * H / height, r1 = (i + 1) * H / height, c0 = j * W / width, c1 = (j + 1) * W / width;
          double acc = 0;
          for (Index r = r0; r < r1; ++r)
            for (Index c = c0; c < c1; ++c) acc += mask[p * H * W + r * W + c];
          v = acc / static_cast<double>((r1 - r0) * (c1 - c0)) >= 0.5 ? 1.0 : 0.0;
        }
        out[(p * height + i) * width + j] = v > 0.5 ? 1.0 : 0.0;
      }
  return out;
}

int thread_budget() {
  if (const char* env = std::getenv("TPSEG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace tpseg
