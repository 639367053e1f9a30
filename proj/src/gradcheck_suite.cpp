#include "tpseg/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>

#include "tpseg/gradcheck.hpp"
#include "tpseg/model.hpp"
#include "tpseg/ops.hpp"
#include "tpseg/rng.hpp"

namespace tpseg {

namespace {

using V = Var<double>;
using T = Tensor<double>;
constexpr double kStep = 1e-5;

T randn(Shape shape, SplitMix64& rng, double scale = 1.0) {
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

T binary(Shape shape, SplitMix64& rng) {
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return t;
}

/// Checks d/dx_i of sum(op(x) * R) for every input i, R random.
double check_inputs(const std::vector<T>& inputs, const std::function<V(const std::vector<V>&)>& op,
                    SplitMix64& rng) {
  std::vector<V> consts;
  for (const auto& t : inputs) consts.emplace_back(t);
  const V probe = op(consts);
  const V weight(randn(probe.shape(), rng));
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto fn = [&](const V& x) {
      std::vector<V> args = consts;
      args[i] = x;
      return sum(op(args) * weight);
    };
    worst = std::max(worst, finite_diff_check<double>(fn, inputs[i], kStep));
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::function<double(SplitMix64&)> run;
};

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<double(SplitMix64&)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };
  add_case("add", [](SplitMix64& r) {
    return check_inputs({randn({3, 4}, r), randn({3, 4}, r)}, [](auto& a) { return a[0] + a[1]; }, r);
  });
  add_case("sub", [](SplitMix64& r) {
    return check_inputs({randn({3, 4}, r), randn({3, 4}, r)}, [](auto& a) { return a[0] - a[1]; }, r);
  });
  add_case("mul", [](SplitMix64& r) {
    return check_inputs({randn({3, 4}, r), randn({3, 4}, r)}, [](auto& a) { return a[0] * a[1]; }, r);
  });
  add_case("add_scalar/mul_scalar", [](SplitMix64& r) {
    return check_inputs({randn({5}, r)}, [](auto& a) { return (a[0] + 0.7) * -1.3; }, r);
  });
  add_case("scale", [](SplitMix64& r) {
    return check_inputs({randn({2, 3}, r), randn({1}, r)}, [](auto& a) { return scale(a[0], a[1]); }, r);
  });
  add_case("gelu", [](SplitMix64& r) {
    return check_inputs({randn({12}, r, 2.0)}, [](auto& a) { return gelu(a[0]); }, r);
  });
  add_case("sigmoid", [](SplitMix64& r) {
    return check_inputs({randn({12}, r, 2.0)}, [](auto& a) { return sigmoid(a[0]); }, r);
  });
  add_case("tanh", [](SplitMix64& r) {
    return check_inputs({randn({12}, r, 2.0)}, [](auto& a) { return tanh(a[0]); }, r);
  });
  add_case("softplus", [](SplitMix64& r) {
    return check_inputs({randn({12}, r, 3.0)}, [](auto& a) { return softplus(a[0]); }, r);
  });
  add_case("sum/mean", [](SplitMix64& r) {
    return check_inputs({randn({4, 3}, r)}, [](auto& a) { return sum(a[0]) + mean(a[0]) * 3.0; }, r);
  });
  add_case("reshape/element", [](SplitMix64& r) {
    return check_inputs({randn({2, 6}, r)}, [](auto& a) { return element(reshape(a[0], {3, 4}), 5) * 2.0; }, r);
  });
  add_case("concat", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 2}, r), randn({2, 1, 2}, r)},
                        [](auto& a) { return concat<double>({a[0], a[1]}, 1); }, r);
  });
  add_case("cumsum", [](SplitMix64& r) {
    return check_inputs({randn({6}, r)}, [](auto& a) { return cumsum(a[0]); }, r);
  });
  add_case("to_tokens/from_tokens", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 4, 4}, r)}, [](auto& a) {
      V t = to_tokens(a[0], 2);
      return from_tokens(t * t, Shape{2, 3, 4, 4}, 2);
    }, r);
  });
  add_case("linear", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 5}, r), randn({4, 5}, r), randn({4}, r)},
                        [](auto& a) { return linear(a[0], a[1], a[2]); }, r);
  });
  add_case("bmm", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 4}, r), randn({2, 4, 5}, r)}, [](auto& a) { return bmm(a[0], a[1]); }, r);
  });
  add_case("softmax", [](SplitMix64& r) {
    return check_inputs({randn({3, 5}, r, 2.0)}, [](auto& a) { return softmax(a[0]); }, r);
  });
  add_case("attention", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 4}, r), randn({2, 6, 4}, r), randn({2, 6, 5}, r)},
                        [](auto& a) { return attention(a[0], a[1], a[2]); }, r);
  });
  add_case("cross_attention", [](SplitMix64& r) {
    return check_inputs({randn({1, 8}, r), randn({16, 8}, r), randn({16, 8}, r)},
                        [](auto& a) { return cross_attention(a[0], a[1], a[2]); }, r);
  });
  add_case("conv2d", [](SplitMix64& r) {
    const Index stride = 1 + static_cast<Index>(r.below(2));
    const Index pad = static_cast<Index>(r.below(2));
    return check_inputs({randn({2, 3, 6, 6}, r), randn({4, 3, 3, 3}, r), randn({4}, r)},
                        [=](auto& a) { return conv2d(a[0], a[1], a[2], stride, pad); }, r);
  });
  add_case("conv2d_1x1", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 4, 4}, r), randn({5, 3, 1, 1}, r), randn({5}, r)},
                        [](auto& a) { return conv2d(a[0], a[1], a[2], 1, 0); }, r);
  });
  add_case("depthwise_conv2d", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 5, 5}, r), randn({2, 3, 3, 3}, r)},
                        [](auto& a) { return depthwise_conv2d(a[0], a[1], 1); }, r);
  });
  add_case("group_norm", [](SplitMix64& r) {
    return check_inputs({randn({2, 4, 3, 3}, r, 2.0), randn({4}, r), randn({4}, r)},
                        [](auto& a) { return group_norm(a[0], 2, a[1], a[2], 1e-5); }, r);
  });
  add_case("layer_norm", [](SplitMix64& r) {
    return check_inputs({randn({3, 6}, r, 2.0)}, [](auto& a) { return layer_norm(a[0], 1e-6); }, r);
  });
  add_case("upsample_nearest", [](SplitMix64& r) {
    return check_inputs({randn({1, 2, 3, 3}, r)}, [](auto& a) { return upsample_nearest(a[0], 6, 6); }, r);
  });
  add_case("upsample_bilinear", [](SplitMix64& r) {
    return check_inputs({randn({1, 2, 3, 4}, r)}, [](auto& a) { return upsample_bilinear(a[0], 6, 8); }, r);
  });
  add_case("cosine_map", [](SplitMix64& r) {
    T p = randn({4}, r);
    p.values().normalize();
    return check_inputs({randn({2, 4, 3, 3}, r)}, [p](auto& a) { return cosine_map(a[0], p); }, r);
  });
  add_case("mul_spatial", [](SplitMix64& r) {
    return check_inputs({randn({2, 3, 3, 3}, r), randn({2, 3, 3}, r)},
                        [](auto& a) { return mul_spatial(a[0], a[1]); }, r);
  });
  add_case("bce_with_logits", [](SplitMix64& r) {
    T target = binary({2, 1, 4, 4}, r);
    return check_inputs({randn({2, 1, 4, 4}, r, 2.0)}, [target](auto& a) { return bce_with_logits(a[0], target); }, r);
  });
  add_case("soft_dice_loss", [](SplitMix64& r) {
    T target = binary({2, 1, 4, 4}, r);
    return check_inputs({randn({2, 1, 4, 4}, r, 2.0)}, [target](auto& a) { return soft_dice_loss(a[0], target); }, r);
  });
  return cases;
}

}  // namespace

GradcheckReport run_op_gradchecks(int seeds, double tolerance) {
  GradcheckReport report;
  report.tolerance = tolerance;
  for (const auto& c : op_cases()) {
    GradcheckEntry entry{c.name, 0.0, seeds, false};
    for (int s = 0; s < seeds; ++s) {
      SplitMix64 rng(derive_seed(0x6772616463686bULL, static_cast<std::uint64_t>(s)));
      entry.max_error = std::max(entry.max_error, c.run(rng));
    }
    entry.passed = entry.max_error < tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

namespace {

ModelConfig micro_config(Index blocks) {
  ModelConfig c;
  c.tasks = 2;
  c.image_size = 8;
  c.stem_channels = 2;
  c.stage1_channels = 4;
  c.stage2_channels = 4;
  c.blocks = blocks;
  c.stage1_blocks = 1;
  c.stage1_window = 2;
  c.stage2_window = 2;
  c.adapter_reduction = 4;
  c.adapter_groups = 2;
  c.levels = 1;
  c.fuse_channels = {2};
  c.decoder_groups = 2;
  c.descriptor_dim = 4;
  c.experts = 2;
  c.embedding_dim = 4;
  c.init_hidden = 4;
  c.seed = 11;
  return c;
}

void check_model(GradcheckReport& report, const std::string& tag, const ModelConfig& config, double tolerance) {
  TpSeg<double> model(config);
  SplitMix64 rng(derive_seed(config.seed, 0x6d6f64656cULL));
  std::vector<T> images, masks;
  for (int t = 0; t < config.tasks; ++t) {
    T x({2, 1, config.image_size, config.image_size}), y(x.shape());
    for (Index i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform();
      y[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    images.push_back(std::move(x));
    masks.push_back(std::move(y));
  }
  const double tem = 0.6;
  auto loss = [&]() {
    V total;
    for (int t = 0; t < config.tasks; ++t) {
      const V l = seg_loss(model.forward(images[static_cast<std::size_t>(t)], t, tem).logits,
                           masks[static_cast<std::size_t>(t)]);
      total = total.defined() ? total + l : l;
    }
    return total;
  };
  std::vector<V> vars;
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    if (p.role == ParamRole::Frozen) continue;
    vars.push_back(p.var);
    names.push_back(p.name);
  }
  const std::vector<double> worst = finite_diff_check_params<double>(loss, vars, kStep);
  for (std::size_t k = 0; k < vars.size(); ++k) {
    report.entries.push_back({tag + "." + names[k], worst[k], static_cast<int>(vars[k].size()), worst[k] < tolerance});
  }
}

}  // namespace

GradcheckReport run_model_gradchecks(double tolerance) {
  GradcheckReport report;
  report.tolerance = tolerance;
  check_model(report, "micro", micro_config(2), tolerance);
  check_model(report, "micro4", micro_config(4), tolerance);
  return report;
}

GradcheckEntry run_broken_fixture(double tolerance) {
  SplitMix64 rng(99);
  auto broken_square = [](const V& x) {
    T y(x.shape(), x.value().values().cwiseAbs2());
    return sum(make_op<double>(std::move(y), {x.node()}, [](Node<double>& self) {
      // d(x^2)/dx reported as x
      self.inputs[0]->grad_buffer().values() += self.grad.values().cwiseProduct(self.inputs[0]->value.values());
    }));
  };
  GradcheckEntry entry{"broken_fixture", 0.0, 1, false};
  entry.max_error = finite_diff_check<double>(broken_square, randn({8}, rng), kStep);
  entry.passed = entry.max_error < tolerance;
  return entry;
}

}  // namespace tpseg
