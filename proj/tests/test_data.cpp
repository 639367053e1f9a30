#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "tpseg/data.hpp"
#include "tpseg/rng.hpp"

using namespace tpseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tpseg_test_" + name);
  fs::remove_all(p);
  return p;
}

struct Polarity {
  double inside, outside;
};

Polarity polarity(const SegmentationSample& s) {
  double in = 0, out = 0, nin = 0, nout = 0;
  for (Index i = 0; i < s.image.size(); ++i) {
    if (s.mask[i] > 0.5) {
      in += s.image[i];
      nin += 1;
    } else {
      out += s.image[i];
      nout += 1;
    }
  }
  return {in / nin, out / nout};
}

}  // namespace

TEST_CASE("generation is deterministic and masks are non-empty") {
  const auto specs = default_task_specs(4, 20, 0.04);
  for (const auto& spec : specs) {
    const auto a = gen_task_dataset(spec, 64, 77);
    const auto b = gen_task_dataset(spec, 64, 77, 3);
    REQUIRE(a.size() == 20);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].sample_id == b[i].sample_id);
      CHECK(std::memcmp(a[i].image.data(), b[i].image.data(), sizeof(double) * 4096) == 0);
      CHECK(std::memcmp(a[i].mask.data(), b[i].mask.data(), sizeof(double) * 4096) == 0);
      CHECK(a[i].mask.values().sum() > 0);
      CHECK(a[i].image.values().minCoeff() >= 0.0);
      CHECK(a[i].image.values().maxCoeff() <= 1.0);
      for (Index k = 0; k < 4096; ++k) CHECK((a[i].mask[k] == 0.0 || a[i].mask[k] == 1.0));
    }
    const auto c = gen_task_dataset(spec, 64, 78);
    CHECK(std::memcmp(a[0].image.data(), c[0].image.data(), sizeof(double) * 4096) != 0);
  }
  CHECK_THROWS_AS(gen_task_dataset({0, GeneratorKind::Ring, 0.0, 0}, 64, 1), ConfigError);
}

TEST_CASE("opposite polarity for the two conflicting kinds over 100 samples") {
  const auto specs = default_task_specs(2, 100, 0.04);
  double diff[2] = {0, 0};
  for (int k = 0; k < 2; ++k) {
    for (const auto& s : gen_task_dataset(specs[static_cast<std::size_t>(k)], 64, 5)) {
      const auto p = polarity(s);
      diff[k] += (p.inside - p.outside) / 100.0;
      if (k == 0) CHECK(p.inside - p.outside >= 0.2);
      if (k == 1) CHECK(p.outside - p.inside >= 0.2);
    }
  }
  CHECK(diff[0] >= 0.2);
  CHECK(diff[1] <= -0.2);
}

TEST_CASE("shape statistics per kind") {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::uint64_t seed = rng();
    // one to three bright ellipses with semi-axes 4..10
    const double ellipse = generate_sample({0, GeneratorKind::BrightEllipse, 0.0, 1}, 64, seed).mask.values().sum();
    CHECK(ellipse >= 0.8 * M_PI * 4 * 4);
    CHECK(ellipse <= 1.2 * 3 * M_PI * 10 * 10);
    // one to three blobs, radius 5..9 with 20% lobes
    const double blob = generate_sample({1, GeneratorKind::DarkBlob, 0.0, 1}, 64, seed).mask.values().sum();
    CHECK(blob >= 0.8 * M_PI * 5 * 5 * 0.8 * 0.8);
    CHECK(blob <= 1.2 * 3 * M_PI * 9 * 9 * 1.2 * 1.2);
    const double ring = generate_sample({2, GeneratorKind::Ring, 0.0, 1}, 64, seed).mask.values().sum();
    CHECK(ring >= 0.8 * M_PI * (10 * 10 - 7 * 7));
    CHECK(ring <= 1.2 * M_PI * (18 * 18 - 12 * 12));
    const double dots = generate_sample({3, GeneratorKind::MultiDot, 0.0, 1}, 64, seed).mask.values().sum();
    CHECK(dots >= 0.8 * 3 * M_PI * 2 * 2);
    CHECK(dots <= 1.2 * 6 * M_PI * 4 * 4);
  }
}

TEST_CASE("dataset disk round trip") {
  const fs::path root = scratch("roundtrip");
  DataConfig cfg;
  cfg.size = 32;
  cfg.train = 6;
  cfg.val = 3;
  cfg.seed = 9;
  const auto data = generate_data(cfg, 2);
  save_dataset(root.string(), data);
  CHECK(fs::exists(root / "manifest.json"));
  CHECK(fs::exists(root / "data" / "task2" / "val" / (data.val[2][0].sample_id + ".img.pgm")));
  const auto back = load_dataset(root.string());
  REQUIRE(back.tasks() == 4);
  for (int t = 0; t < 4; ++t) {
    REQUIRE(back.train[t].size() == 6);
    REQUIRE(back.val[t].size() == 3);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& a = data.train[t][i];
      const auto& b = back.train[t][i];
      CHECK(a.sample_id == b.sample_id);
      CHECK(b.task_id == t);
      CHECK((a.image.values() - b.image.values()).cwiseAbs().maxCoeff() <= 1.0 / 255.0);
      CHECK((a.mask.values() - b.mask.values()).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  const auto manifest = nlohmann::json::parse(std::ifstream(root / "manifest.json"));
  int train = 0, val = 0;
  for (const auto& s : manifest["samples"]) (s["split"] == "train" ? train : val) += 1;
  CHECK(train == 24);
  CHECK(val == 12);
  fs::remove_all(root);
}

TEST_CASE("load errors name the offending path") {
  const fs::path root = scratch("errors");
  DataConfig cfg;
  cfg.size = 16;
  cfg.tasks = 2;
  cfg.train = 2;
  cfg.val = 1;
  save_dataset(root.string(), generate_data(cfg));

  auto manifest = nlohmann::json::parse(std::ifstream(root / "manifest.json"));
  manifest["samples"][0]["task_id"] = 7;
  std::ofstream(root / "manifest.json") << manifest.dump();
  CHECK_THROWS_AS(load_dataset(root.string()), IoError);

  manifest["samples"][0]["task_id"] = 0;
  std::ofstream(root / "manifest.json") << manifest.dump();
  const std::string victim = (root / manifest["samples"][1]["image"].get<std::string>()).string();
  std::ofstream(victim, std::ios::binary) << "P5\n16 16\n255\nxx";
  try {
    load_dataset(root.string());
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    CHECK(e.path() == victim);
  }
  fs::remove(victim);
  CHECK_THROWS_AS(load_dataset(root.string()), IoError);
  CHECK_THROWS_AS(load_dataset((root / "missing").string()), IoError);
  fs::remove_all(root);
}

TEST_CASE("mask downsampling") {
  CHECK(downsample_mask(Tensor<double>::full({8, 8}, 1.0), 3, 3).values().minCoeff() == 1.0);
  Tensor<double> checker({8, 8});
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) checker[i * 8 + j] = (i + j) % 2;
  // top-left corners (2i, 2j) all have even coordinate sums
  CHECK(downsample_mask(checker, 4, 4).values().maxCoeff() == 0.0);
  Tensor<double> shifted({8, 8});
  for (Index i = 0; i < 64; ++i) shifted[i] = 1 - checker[i];
  CHECK(downsample_mask(shifted, 4, 4).values().minCoeff() == 1.0);
  CHECK(downsample_mask(checker, 4, 4, MaskResample::AreaThreshold).values().minCoeff() == 1.0);

  SplitMix64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Index H = 4 + static_cast<Index>(rng.below(20)), W = 4 + static_cast<Index>(rng.below(20));
    const Index h = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(H)));
    const Index w = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(W)));
    Tensor<double> m({2, 1, H, W});
    for (Index i = 0; i < m.size(); ++i) m[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const auto got = downsample_mask(m, h, w);
    REQUIRE(got.shape() == Shape{2, 1, h, w});
    for (Index n = 0; n < 2; ++n)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) {
          const auto si = static_cast<Index>(std::floor(static_cast<double>(i) * H / h));
          const auto sj = static_cast<Index>(std::floor(static_cast<double>(j) * W / w));
          CHECK(got.at(n, 0, i, j) == m.at(n, 0, si, sj));
        }
  }
  CHECK_THROWS_AS(downsample_mask(checker, 9, 4), ShapeError);
}
