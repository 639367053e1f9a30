#include "tpseg/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace tpseg {

Confusion confusion(const Tensor<double>& pred, const Tensor<double>& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("metric shapes differ: " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  }
  Confusion c;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5, g = gt[i] > 0.5;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice(const Confusion& c) {
  const long denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double miou(const Confusion& c) {
  auto iou = [](long inter, long uni) { return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni); };
  return 0.5 * (iou(c.tp, c.tp + c.fp + c.fn) + iou(c.tn, c.tn + c.fp + c.fn));
}

double dice(const Tensor<double>& pred, const Tensor<double>& gt) { return dice(confusion(pred, gt)); }
double miou(const Tensor<double>& pred, const Tensor<double>& gt) { return miou(confusion(pred, gt)); }

double MetricsRecord::mean_dice() const {
  double s = 0;
  for (const auto& t : tasks) s += t.dice;
  return tasks.empty() ? 0.0 : s / static_cast<double>(tasks.size());
}

double MetricsRecord::mean_miou() const {
  double s = 0;
  for (const auto& t : tasks) s += t.miou;
  return tasks.empty() ? 0.0 : s / static_cast<double>(tasks.size());
}

std::string metrics_csv(const std::vector<MetricsRecord>& history) {
  std::ostringstream out;
  out << "epoch,task,dice,miou\n";
  char buf[96];
  for (const auto& r : history) {
    for (std::size_t t = 0; t < r.tasks.size(); ++t) {
      std::snprintf(buf, sizeof buf, "%d,%zu,%.6f,%.6f\n", r.epoch, t, r.tasks[t].dice, r.tasks[t].miou);
      out << buf;
    }
  }
  return out.str();
}

std::string metrics_json(const std::vector<MetricsRecord>& history) {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const auto& r : history) {
    nlohmann::json e;
    e["epoch"] = r.epoch;
    e["step"] = r.step;
    e["temperature"] = r.temperature;
    e["train_loss"] = r.train_loss;
    e["level_loss"] = r.level_loss;
    e["mean_dice"] = r.mean_dice();
    e["mean_miou"] = r.mean_miou();
    for (const auto& t : r.tasks) e["tasks"].push_back({{"dice", t.dice}, {"miou", t.miou}, {"samples", t.samples}});
    j["epochs"].push_back(e);
  }
  if (!history.empty()) {
    j["final"] = j["epochs"].back();
  }
  return j.dump(2);
}

}  // namespace tpseg
