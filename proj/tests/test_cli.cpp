#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "tpseg/config.hpp"
#include "tpseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kTool = TPSEG_CLI_PATH;
const fs::path kSmoke = fs::path(TPSEG_SOURCE_DIR) / "configs" / "smoke.json";

struct Run {
  int code = -1;
  std::string out;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tpseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Run run(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = kTool.string() + " " + args + " > " + out.string() + " 2> " + (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  return r;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::function<void(json&)>& edit) {
  json j = json::parse(slurp(kSmoke));
  j["out"] = (dir / name).string();
  edit(j);
  const fs::path p = dir / (name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

std::map<std::string, std::uint64_t> tree_hashes(const fs::path& root) {
  std::map<std::string, std::uint64_t> h;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) h[fs::relative(e.path(), root).string()] = tpseg::fnv1a64(slurp(e.path()));
  }
  return h;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("gendata writes a deterministic tree and rejects bad sizes") {
  const fs::path dir = scratch("gendata");
  Run a = run("gendata --out " + (dir / "a").string(), dir);
  REQUIRE(a.code == 0);
  const json m = json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(m["tasks"].size() == 4);
  CHECK(m["samples"].size() == 4 * 250);
  CHECK(m["size"] == 64);

  REQUIRE(run("gendata --size 16 --train 5 --val 2 --seed 9 --out " + (dir / "b").string(), dir).code == 0);
  REQUIRE(run("gendata --size 16 --train 5 --val 2 --seed 9 --out " + (dir / "c").string(), dir).code == 0);
  REQUIRE(run("gendata --size 16 --train 5 --val 2 --seed 10 --out " + (dir / "d").string(), dir).code == 0);
  const auto hb = tree_hashes(dir / "b"), hc = tree_hashes(dir / "c"), hd = tree_hashes(dir / "d");
  CHECK(hb.size() == 1 + 4 * 7 * 2);
  CHECK(hb == hc);
  CHECK(hb != hd);

  CHECK(run("gendata --size 0 --out " + (dir / "e").string(), dir).code == 1);
  CHECK_FALSE(fs::exists(dir / "e"));
  CHECK(run("gendata --bogus", dir).code == 1);
  CHECK(run("", dir).code == 1);
}

TEST_CASE("train, resume, eval and analyze on the smoke config") {
  const fs::path dir = scratch("train");
  CHECK(run("train", dir).code == 1);
  CHECK(run("train --config " + (dir / "missing.json").string(), dir).code == 1);
  const fs::path bad = write_config(dir, "bad", [](json& j) { j["train"]["epochz"] = 3; });
  CHECK(run("train --config " + bad.string(), dir).code == 1);

  const fs::path full = write_config(dir, "full", [](json&) {});
  const auto t0 = std::chrono::steady_clock::now();
  const Run r = run("train --quiet --config " + full.string(), dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(r.code == 0);
  MESSAGE("smoke train took " << secs << " s");
  CHECK(secs < 60.0);
  for (const char* f : {"checkpoint.tpck", "metrics.csv", "metrics.json", "summary.json", "config.json"}) {
    CHECK(fs::exists(dir / "full" / f));
  }
  const json summary = json::parse(slurp(dir / "full" / "summary.json"));
  CHECK(summary["epoch"] == 2);
  CHECK(summary["step"] == 2 * 20);
  CHECK(summary["temperature"].get<double>() == doctest::Approx(0.3).epsilon(1e-12));
  const auto csv = read_csv(dir / "full" / "metrics.csv");
  REQUIRE(csv.size() == 1 + 2 * 4);
  CHECK(csv[0] == std::vector<std::string>{"epoch", "task", "dice", "miou"});

  SUBCASE("resume continues step counter and temperature") {
    const fs::path one = write_config(dir, "half", [](json& j) { j["train"]["epochs"] = 1; j["train"]["temperature_steps"] = 40; });
    REQUIRE(run("train --quiet --config " + one.string(), dir).code == 0);
    const tpseg::Checkpoint mid = tpseg::Checkpoint::read((dir / "half" / "checkpoint.tpck").string());
    CHECK(mid.step == 20);
    CHECK(mid.temperature == doctest::Approx(1.0 - 0.7 * 0.5));

    const fs::path two = write_config(dir, "half", [](json& j) { j["train"]["temperature_steps"] = 40; });
    REQUIRE(run("train --quiet --config " + two.string() + " --resume " + (dir / "half" / "checkpoint.tpck").string(),
                dir).code == 0);
    const json s = json::parse(slurp(dir / "half" / "summary.json"));
    CHECK(s["step"] == 40);
    CHECK(s["epoch"] == 2);
    CHECK(s["temperature"].get<double>() == doctest::Approx(0.3));
    // uninterrupted run lands on the same numbers
    CHECK(s["mean_dice"] == summary["mean_dice"]);
    CHECK(s["mean_miou"] == summary["mean_miou"]);
    const auto a = tpseg::Checkpoint::read((dir / "half" / "checkpoint.tpck").string());
    const auto b = tpseg::Checkpoint::read((dir / "full" / "checkpoint.tpck").string());
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (const auto& [name, t] : b.tensors) {
      INFO(name);
      CHECK(a.tensors.at(name).values() == t.values());
    }
  }

  SUBCASE("eval") {
    const std::string ck = (dir / "full" / "checkpoint.tpck").string();
    const Run e = run("eval --checkpoint " + ck + " --task 2", dir);
    REQUIRE(e.code == 0);
    const json j = json::parse(e.out);
    CHECK(j.contains("dice"));
    CHECK(j.contains("miou"));
    CHECK(j["task"] == 2);
    CHECK(j["samples"] == 10);

    const Run all = run("eval --checkpoint " + ck + " --all-tasks", dir);
    REQUIRE(all.code == 0);
    const json m = json::parse(all.out);
    REQUIRE(m["dice"].size() == 4);
    REQUIRE(m["miou"].size() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(m["dice"][i].size() == 4);
      CHECK(m["miou"][i].size() == 4);
    }
    CHECK(m["dice"][2][2] == j["dice"]);
    CHECK(m["miou"][2][2] == j["miou"]);
    CHECK(run("eval --checkpoint " + ck + " --all-tasks", dir).out == all.out);

    CHECK(run("eval --checkpoint " + ck + " --task 4", dir).code != 0);
    CHECK(run("eval --checkpoint " + ck + " --task -1", dir).code != 0);
    CHECK(run("eval --checkpoint " + ck, dir).code == 1);
    CHECK(run("eval --checkpoint " + (dir / "nope.tpck").string() + " --task 0", dir).code == 2);
  }

  SUBCASE("analyze") {
    const fs::path out = dir / "analysis";
    REQUIRE(run("analyze --checkpoint " + (dir / "full" / "checkpoint.tpck").string() + " --out " + out.string(), dir)
                .code == 0);
    for (int k = 0; k < 3; ++k) {
      const auto rows = read_csv(out / ("similarity_level" + std::to_string(k) + ".csv"));
      REQUIRE(rows.size() == 5);
      for (int i = 0; i < 4; ++i) {
        REQUIRE(rows[i + 1].size() == 5);
        for (int j = 0; j < 4; ++j) {
          const double v = std::stod(rows[i + 1][j + 1]), w = std::stod(rows[j + 1][i + 1]);
          CHECK(v == w);
          if (i == j) CHECK(v == doctest::Approx(1.0).epsilon(1e-7));
        }
      }
    }
    const auto sep = read_csv(out / "separation.csv");
    REQUIRE(sep.size() == 1 + 4 * 3);
    for (std::size_t i = 1; i < sep.size(); ++i) {
      const double s = std::stod(sep[i][2]);
      CHECK(s >= 0.0);
      CHECK(s <= 2.0);
    }
    const json gates = json::parse(slurp(out / "gates.json"));
    CHECK(gates.size() == 4);

    // decoder is shared: nothing decoder-like is billed per task, and its
    // size is the same with a fifth task
    const fs::path five = write_config(dir, "five", [](json& j) {
      j["model"]["tasks"] = 5;
      j["data"]["tasks"] = 5;
      j["train"]["epochs"] = 0;
    });
    REQUIRE(run("train --quiet --config " + five.string(), dir).code == 0);
    REQUIRE(run("analyze --checkpoint " + (dir / "five" / "checkpoint.tpck").string() + " --out " +
                    (dir / "five_an").string(), dir).code == 0);
    auto decoder_of = [](const std::vector<std::vector<std::string>>& rows) {
      long shared = -1;
      for (const auto& r : rows) {
        if (r[0] != "shared" && r[0] != "all" && r[0] != "scope") CHECK(r[1] != "decoder");
        if (r[0] == "shared" && r[1] == "decoder") shared = std::stol(r[2]);
      }
      return shared;
    };
    const long d4 = decoder_of(read_csv(out / "census.csv"));
    const long d5 = decoder_of(read_csv(dir / "five_an" / "census.csv"));
    CHECK(d4 > 0);
    CHECK(d4 == d5);
  }
}

TEST_CASE("gradcheck reports every op and fails on the broken fixture") {
  const fs::path dir = scratch("gradcheck");
  const Run ok = run("gradcheck", dir);
  CHECK(ok.code == 0);
  const auto rows = read_csv(dir / "stdout.txt");
  REQUIRE(rows.size() > 10);
  CHECK(rows[0] == std::vector<std::string>{"name", "max_rel_error", "trials", "status"});
  std::set<std::string> names;
  bool micro = false;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 4);
    CHECK(rows[i][3] == "pass");
    CHECK(std::stod(rows[i][1]) < 1e-4);
    names.insert(rows[i][0]);
    micro = micro || rows[i][0].rfind("micro.", 0) == 0;
  }
  CHECK(micro);
  CHECK(names.size() == rows.size() - 1);

  const Run broken = run("gradcheck --ops-only --seeds 2 --inject-broken", dir);
  CHECK(broken.code != 0);
  CHECK(broken.out.find("FAIL") != std::string::npos);
  CHECK(run("gradcheck --seeds 0", dir).code == 1);
}
