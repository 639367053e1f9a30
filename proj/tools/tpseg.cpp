#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tpseg/config.hpp"
#include "tpseg/data.hpp"
#include "tpseg/error.hpp"
#include "tpseg/gradcheck_suite.hpp"
#include "tpseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tpseg;

namespace {

struct UsageError : Error {
  using Error::Error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string(), "cannot write");
  f << text;
  if (!f) throw IoError(path.string(), "write failed");
}

MultiTaskData load_data(const RunConfig& run, const std::string& override_dir) {
  const std::string dir = override_dir.empty() ? run.data_dir : override_dir;
  if (dir.empty()) return generate_data(run.data, thread_budget());
  MultiTaskData data = load_dataset(dir);
  if (data.tasks() != run.model.tasks || data.size != run.model.image_size) {
    throw ConfigError("dataset at " + dir + " does not match the model's tasks or image size");
  }
  return data;
}

// gendata

struct GendataArgs {
  int tasks = 4;
  long size = 64;
  int train = 200, val = 50;
  double noise = DataConfig{}.noise;
};

int cmd_gendata(const Globals& g, const GendataArgs& a) {
  if (a.size <= 0 || a.tasks <= 0 || a.train <= 0 || a.val < 0) {
    throw UsageError("gendata: --size, --tasks and --train must be positive, --val non-negative");
  }
  DataConfig dc;
  dc.tasks = a.tasks;
  dc.size = a.size;
  dc.train = a.train;
  dc.val = a.val;
  dc.noise = a.noise;
  dc.seed = g.seed.value_or(0);
  const std::string root = g.out.empty() ? "data" : g.out;
  const MultiTaskData data = generate_data(dc, thread_budget());
  save_dataset(root, data);
  json j{{"root", root}, {"tasks", data.tasks()}, {"size", data.size}, {"seed", dc.seed}};
  for (int t = 0; t < data.tasks(); ++t) {
    j["splits"].push_back({{"task", t}, {"kind", to_string(data.specs[static_cast<std::size_t>(t)].kind)},
                           {"train", data.train[static_cast<std::size_t>(t)].size()},
                           {"val", data.val[static_cast<std::size_t>(t)].size()}});
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

// train

struct TrainArgs {
  std::string resume;
  std::string data;
  bool quiet = false;
};

template <typename S>
int run_train(const RunConfig& run, const TrainArgs& a) {
  const MultiTaskData data = load_data(run, a.data);
  const fs::path out(run.out);
  fs::create_directories(out);
  write_text(out / "config.json", run.to_json() + "\n");

  Trainer<S> trainer(run.model, run.train, data);
  trainer.diagnostics_dir = out.string();
  if (!a.resume.empty()) {
    trainer.load_state(a.resume);
    if (!a.quiet) {
      std::fprintf(stderr, "resumed at epoch %d, step %ld, tem %.4f\n", trainer.epoch(), trainer.step(),
                   trainer.temperature());
    }
  }
  const fs::path ckpt = out / "checkpoint.tpck";
  const auto t0 = std::chrono::steady_clock::now();
  trainer.fit([&](const MetricsRecord& r) {
    trainer.save(ckpt.string(), run);
    write_text(out / "metrics.csv", metrics_csv(trainer.history()));
    if (!a.quiet) {
      std::fprintf(stderr, "epoch %d step %ld tem %.3f loss %.4f dice %.4f miou %.4f\n", r.epoch, r.step,
                   r.temperature, r.train_loss, r.mean_dice(), r.mean_miou());
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  trainer.save(ckpt.string(), run);
  write_text(out / "metrics.csv", metrics_csv(trainer.history()));
  write_text(out / "metrics.json", metrics_json(trainer.history()) + "\n");

  json s;
  s["checkpoint"] = ckpt.string();
  s["config_hash"] = run.hash();
  s["epoch"] = trainer.epoch();
  s["step"] = trainer.step();
  s["temperature"] = trainer.temperature();
  s["seconds"] = secs;
  s["precision"] = run.train.precision;
  if (!trainer.history().empty()) {
    const MetricsRecord& last = trainer.history().back();
    s["mean_dice"] = last.mean_dice();
    s["mean_miou"] = last.mean_miou();
    for (const auto& t : last.tasks) s["tasks"].push_back({{"dice", t.dice}, {"miou", t.miou}});
  }
  write_text(out / "summary.json", s.dump(2) + "\n");
  std::cout << s.dump(2) << '\n';
  return 0;
}

int cmd_train(const Globals& g, const TrainArgs& a) {
  if (g.config.empty()) throw UsageError("train: --config is required");
  RunConfig run = RunConfig::load(g.config);
  if (g.seed) {
    run.model.seed = *g.seed;
    run.train.seed = *g.seed;
  }
  if (!g.out.empty()) run.out = g.out;
  if (run.train.precision == "double") return run_train<double>(run, a);
  return run_train<float>(run, a);
}

// eval

struct EvalArgs {
  std::string checkpoint;
  std::optional<int> task;
  bool all_tasks = false;
  std::string data;
  std::string split = "val";
};

template <typename S>
int run_eval(const Checkpoint& ck, const EvalArgs& a) {
  const TpSeg<S> model = load_model<S>(ck);
  const MultiTaskData data = load_data(ck.config, a.data);
  const auto& split = a.split == "train" ? data.train : data.val;
  const int T = model.tasks();
  auto samples = [&](int t) -> const std::vector<SegmentationSample>& {
    if (t < 0 || t >= T) throw TaskError("task " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
    return split[static_cast<std::size_t>(t)];
  };
  json j;
  j["split"] = a.split;
  j["temperature"] = ck.temperature;
  if (a.all_tasks) {
    // rows: data of task i, columns: routed and conditioned as task j
    json dice = json::array(), miou = json::array();
    for (int i = 0; i < T; ++i) {
      json drow = json::array(), mrow = json::array();
      for (int k = 0; k < T; ++k) {
        const TaskMetrics m = evaluate(model, samples(i), k, ck.temperature);
        drow.push_back(m.dice);
        mrow.push_back(m.miou);
      }
      dice.push_back(drow);
      miou.push_back(mrow);
    }
    j["tasks"] = T;
    j["dice"] = dice;
    j["miou"] = miou;
  } else {
    const int t = *a.task;
    const TaskMetrics m = evaluate(model, samples(t), t, ck.temperature);
    j["task"] = t;
    j["dice"] = m.dice;
    j["miou"] = m.miou;
    j["samples"] = m.samples;
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  if (a.all_tasks == a.task.has_value()) throw UsageError("eval: give exactly one of --task or --all-tasks");
  const Checkpoint ck = Checkpoint::read(a.checkpoint);
  if (a.task && (*a.task < 0 || *a.task >= ck.config.model.tasks)) {
    throw TaskError("task " + std::to_string(*a.task) + " outside [0, " + std::to_string(ck.config.model.tasks) + ")");
  }
  if (ck.config.train.precision == "double") return run_eval<double>(ck, a);
  return run_eval<float>(ck, a);
}

// analyze

template <typename S>
int run_analyze(const Checkpoint& ck, const fs::path& out) {
  const TpSeg<S> model = load_model<S>(ck);
  const PrototypeBank& bank = model.bank();
  fs::create_directories(out);
  const int T = bank.tasks();
  char buf[64];
  json files = json::array();

  for (int k = 0; k < bank.levels(); ++k) {
    const Eigen::MatrixXd sim = bank.similarity_matrix(k);
    std::ostringstream csv;
    csv << "task";
    for (int j = 0; j < T; ++j) csv << ",task" << j;
    csv << '\n';
    for (int i = 0; i < T; ++i) {
      csv << "task" << i;
      for (int j = 0; j < T; ++j) {
        std::snprintf(buf, sizeof buf, ",%.8f", sim(i, j));
        csv << buf;
      }
      csv << '\n';
    }
    const std::string name = "similarity_level" + std::to_string(k) + ".csv";
    write_text(out / name, csv.str());
    files.push_back(name);
  }

  std::ostringstream sep;
  sep << "task,level,separation\n";
  for (int k = 0; k < bank.levels(); ++k) {
    const std::vector<double> s = bank.separation_scores(k);
    for (int t = 0; t < T; ++t) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.8f\n", t, k, s[static_cast<std::size_t>(t)]);
      sep << buf;
    }
  }
  write_text(out / "separation.csv", sep.str());
  write_text(out / "gates.json", model.encoder().gate_json(ck.temperature) + "\n");
  write_text(out / "census.csv", model.census().to_csv());
  files.push_back("separation.csv");
  files.push_back("gates.json");
  files.push_back("census.csv");

  std::cout << json{{"out", out.string()}, {"files", files}, {"temperature", ck.temperature}}.dump(2) << '\n';
  return 0;
}

int cmd_analyze(const Globals& g, const std::string& checkpoint) {
  const Checkpoint ck = Checkpoint::read(checkpoint);
  const fs::path out = g.out.empty() ? fs::path(checkpoint).parent_path() / "analysis" : fs::path(g.out);
  if (ck.config.train.precision == "double") return run_analyze<double>(ck, out);
  return run_analyze<float>(ck, out);
}

// gradcheck

struct GradcheckArgs {
  bool inject_broken = false;
  int seeds = 20;
  double tolerance = 1e-4;
  bool skip_model = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.seeds <= 0 || !(a.tolerance > 0)) throw UsageError("gradcheck: --seeds and --tolerance must be positive");
  GradcheckReport report = run_op_gradchecks(a.seeds, a.tolerance);
  if (!a.skip_model) {
    const GradcheckReport model = run_model_gradchecks(a.tolerance);
    report.entries.insert(report.entries.end(), model.entries.begin(), model.entries.end());
  }
  if (a.inject_broken) report.entries.push_back(run_broken_fixture(a.tolerance));
  std::printf("name,max_rel_error,trials,status\n");
  for (const auto& e : report.entries) {
    std::printf("%s,%.3e,%d,%s\n", e.name.c_str(), e.max_error, e.trials, e.passed ? "pass" : "FAIL");
  }
  long failed = 0;
  for (const auto& e : report.entries) failed += e.passed ? 0 : 1;
  std::fprintf(stderr, "%zu checks, %ld failed, tolerance %.1e\n", report.entries.size(), failed, a.tolerance);
  return report.all_passed() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tpseg: task-routed prototype-guided segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--out", g.out, "output directory");

  GendataArgs ga;
  auto* gendata = app.add_subcommand("gendata", "generate the synthetic benchmark");
  gendata->add_option("--tasks", ga.tasks)->capture_default_str();
  gendata->add_option("--size", ga.size)->capture_default_str();
  gendata->add_option("--train", ga.train)->capture_default_str();
  gendata->add_option("--val", ga.val)->capture_default_str();
  gendata->add_option("--noise", ga.noise)->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train from a run config");
  train->add_option("--resume", ta.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "dataset directory written by gendata");
  train->add_flag("--quiet", ta.quiet);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Dice and mIoU of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--task", ea.task);
  eval->add_flag("--all-tasks", ea.all_tasks);
  eval->add_option("--data", ea.data, "dataset directory written by gendata");
  eval->add_option("--split", ea.split)->check(CLI::IsMember({"train", "val"}))->capture_default_str();

  std::string analyze_ckpt;
  auto* analyze = app.add_subcommand("analyze", "prototype, gate and census exports");
  analyze->add_option("--checkpoint", analyze_ckpt)->required();

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient report");
  gradcheck->add_flag("--inject-broken", gc.inject_broken, "append an op with a wrong derivative");
  gradcheck->add_option("--seeds", gc.seeds)->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gradcheck->add_flag("--ops-only", gc.skip_model);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gendata) return cmd_gendata(g, ga);
    if (*train) return cmd_train(g, ta);
    if (*eval) return cmd_eval(ea);
    if (*analyze) return cmd_analyze(g, analyze_ckpt);
    if (*gradcheck) return cmd_gradcheck(gc);
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
