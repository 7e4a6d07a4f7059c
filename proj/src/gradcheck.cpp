#include "unigrid/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "unigrid/rng.hpp"

namespace unigrid {

namespace gradcheck_detail {

// Analytic and reference may come from different builds: straight-through
// estimators are checked against central differences of their soft path.
double fd_check_split(const std::function<GraphD::Var(GraphD&, GraphD::Var)>& build_analytic,
                      const std::function<GraphD::Var(GraphD&, GraphD::Var)>& build_fd,
                      const TensorD& point, double eps) {
  GraphD g;
  auto x = g.leaf(point, true);
  auto loss = build_analytic(g, x);
  if (!g.value(loss).is_scalar())
    throw std::invalid_argument("finite_diff_check: build must produce a scalar");
  if (!std::isfinite(g.value(loss).scalar_value()))
    throw std::invalid_argument("finite_diff_check: non-finite function value");
  g.backward(loss);
  const TensorD analytic = g.grad(x);

  auto eval = [&](const TensorD& p) {
    GraphD gg;
    auto xx = gg.leaf(p, false);
    double v = gg.value(build_fd(gg, xx)).scalar_value();
    if (!std::isfinite(v)) throw std::invalid_argument("finite_diff_check: non-finite probe value");
    return v;
  };

  double max_rel = 0.0;
  TensorD p = point;
  for (size_t i = 0; i < p.data.size(); ++i) {
    const double orig = p.data[i];
    p.data[i] = orig + eps;
    const double fp = eval(p);
    p.data[i] = orig - eps;
    const double fm = eval(p);
    p.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(analytic.data[i] - fd) / (std::abs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace gradcheck_detail

double finite_diff_check(const std::function<GraphD::Var(GraphD&, GraphD::Var)>& build,
                         const TensorD& point, double eps) {
  return gradcheck_detail::fd_check_split(build, build, point, eps);
}

namespace gradcheck_detail {

using Build = std::function<GraphD::Var(GraphD&, GraphD::Var)>;

// loss = sum(out . W) so every output entry participates with a distinct weight.
GraphD::Var weighted_sum(GraphD& g, GraphD::Var out, const TensorD& w) {
  return g.reduce_sum(g.mul(out, g.constant(w)));
}

double max_over(Rng& rng, int instances, const std::function<double(Rng&)>& one) {
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) worst = std::max(worst, one(rng));
  return worst;
}

std::vector<int64_t> random_flat_idx(Rng& rng, int64_t numel, int k) {
  std::vector<int64_t> idx(k);
  for (auto& v : idx) v = static_cast<int64_t>(rng.below(static_cast<uint64_t>(numel)));
  return idx;
}

std::vector<GradCheckResult> op_cases(uint64_t seed, int instances) {
  std::vector<GradCheckResult> results;
  auto add_case = [&](const std::string& name, const std::function<double(Rng&)>& one,
                      double tol = 1e-4) {
    Rng rng(Rng::derive_seed(seed, results.size() + 1));
    GradCheckResult r;
    r.name = name;
    r.tolerance = tol;
    r.max_rel_err = max_over(rng, instances, one);
    results.push_back(r);
  };

  add_case("matmul/lhs", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 4}, rng);
    TensorD b = TensorD::randn({4, 2}, rng);
    TensorD w = TensorD::randn({3, 2}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.matmul(x, g.constant(b)), w); }, a);
  });
  add_case("matmul/rhs", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 4}, rng);
    TensorD b = TensorD::randn({4, 2}, rng);
    TensorD w = TensorD::randn({3, 2}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.matmul(g.constant(a), x), w); }, b);
  });
  add_case("add/elementwise", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 3}, rng);
    TensorD b = TensorD::randn({4, 3}, rng);
    TensorD w = TensorD::randn({4, 3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.add(x, g.constant(b)), w); }, a);
  });
  add_case("add/broadcast-bias", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 3}, rng);
    TensorD b = TensorD::randn({3}, rng);
    TensorD w = TensorD::randn({4, 3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.add(g.constant(a), x), w); }, b);
  });
  add_case("multiply", [](Rng& rng) {
    TensorD a = TensorD::randn({5, 2}, rng);
    TensorD b = TensorD::randn({5, 2}, rng);
    TensorD w = TensorD::randn({5, 2}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.mul(x, g.constant(b)), w); }, a);
  });
  add_case("scale", [](Rng& rng) {
    TensorD a = TensorD::randn({6}, rng);
    TensorD w = TensorD::randn({6}, rng);
    const double s = rng.normal();
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.scale(x, s), w); }, a);
  });
  add_case("broadcast_rows", [](Rng& rng) {
    TensorD v = TensorD::randn({4}, rng);
    TensorD w = TensorD::randn({3, 4}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.broadcast_rows(x, 3), w); }, v);
  });
  add_case("embedding-gather", [](Rng& rng) {
    TensorD table = TensorD::randn({6, 3}, rng);
    std::vector<int> ids = {0, 5, 2, 2, 4};  // includes a repeat
    TensorD w = TensorD::randn({5, 3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.gather_rows(x, ids), w); }, table);
  });
  add_case("slice_rows", [](Rng& rng) {
    TensorD a = TensorD::randn({5, 3}, rng);
    TensorD w = TensorD::randn({2, 3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.slice_rows(x, 1, 3), w); }, a);
  });
  add_case("slice_cols", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 6}, rng);
    TensorD w = TensorD::randn({4, 2}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.slice_cols(x, 2, 4), w); }, a);
  });
  add_case("concat_rows", [](Rng& rng) {
    TensorD a = TensorD::randn({2, 3}, rng);
    TensorD b = TensorD::randn({3, 3}, rng);
    TensorD w = TensorD::randn({5, 3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) {
          return weighted_sum(g, g.concat_rows({x, g.constant(b)}), w);
        },
        a);
  });
  add_case("pick_flat", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 4}, rng);
    auto idx = random_flat_idx(rng, a.numel(), 6);
    TensorD w = TensorD::randn({6}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.pick_flat(x, idx), w); }, a);
  });
  add_case("reshape", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 3}, rng);
    TensorD w = TensorD::randn({2, 6}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.reshape(x, {2, 6}), w); }, a);
  });
  add_case("transpose", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 3}, rng);
    TensorD w = TensorD::randn({3, 4}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.transpose(x), w); }, a);
  });
  add_case("softmax", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 5}, rng);
    TensorD w = TensorD::randn({3, 5}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.softmax_rows(x), w); }, a);
  });
  add_case("log-softmax", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 5}, rng);
    TensorD w = TensorD::randn({3, 5}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.log_softmax_rows(x), w); }, a);
  });
  add_case("layer-norm/x", [](Rng& rng) {
    TensorD x0 = TensorD::randn({3, 8}, rng);
    TensorD gain = TensorD::randn({8}, rng);
    TensorD bias = TensorD::randn({8}, rng);
    TensorD w = TensorD::randn({3, 8}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) {
          return weighted_sum(g, g.layer_norm(x, g.constant(gain), g.constant(bias)), w);
        },
        x0);
  });
  add_case("layer-norm/gain", [](Rng& rng) {
    TensorD x0 = TensorD::randn({3, 8}, rng);
    TensorD gain = TensorD::randn({8}, rng);
    TensorD bias = TensorD::randn({8}, rng);
    TensorD w = TensorD::randn({3, 8}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) {
          return weighted_sum(g, g.layer_norm(g.constant(x0), x, g.constant(bias)), w);
        },
        gain);
  });
  add_case("layer-norm/bias", [](Rng& rng) {
    TensorD x0 = TensorD::randn({3, 8}, rng);
    TensorD gain = TensorD::randn({8}, rng);
    TensorD bias = TensorD::randn({8}, rng);
    TensorD w = TensorD::randn({3, 8}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) {
          return weighted_sum(g, g.layer_norm(g.constant(x0), g.constant(gain), x), w);
        },
        bias);
  });
  add_case("gelu", [](Rng& rng) {
    TensorD a = TensorD::randn({7}, rng);
    TensorD w = TensorD::randn({7}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.gelu(x), w); }, a);
  });
  add_case("exp", [](Rng& rng) {
    TensorD a = TensorD::randn({6}, rng);
    TensorD w = TensorD::randn({6}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.exp_elem(x), w); }, a);
  });
  add_case("cross-entropy-with-logits", [](Rng& rng) {
    TensorD a = TensorD::randn({4, 6}, rng);
    std::vector<int> targets;
    for (int i = 0; i < 4; ++i) targets.push_back(static_cast<int>(rng.below(6)));
    TensorD w = TensorD::randn({4}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.cross_entropy_rows(x, targets), w); },
        a);
  });
  add_case("reduce-sum", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 3}, rng);
    return finite_diff_check([&](GraphD& g, GraphD::Var x) { return g.reduce_sum(x); }, a);
  });
  add_case("reduce-mean", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 3}, rng);
    return finite_diff_check([&](GraphD& g, GraphD::Var x) { return g.reduce_mean(x); }, a);
  });
  add_case("row-sum", [](Rng& rng) {
    TensorD a = TensorD::randn({3, 4}, rng);
    TensorD w = TensorD::randn({3}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.row_sum(x), w); }, a);
  });
  add_case("clip", [](Rng& rng) {
    // Probe points kept away from the clip kinks where FD is undefined.
    TensorD a({5});
    for (auto& v : a.data) {
      do {
        v = 0.6 + rng.uniform();
      } while (std::abs(v - 0.8) < 0.03 || std::abs(v - 1.2) < 0.03);
    }
    TensorD w = TensorD::randn({5}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.clip_elem(x, 0.8, 1.2), w); }, a);
  });
  add_case("min", [](Rng& rng) {
    TensorD a = TensorD::randn({6}, rng);
    TensorD b = TensorD::randn({6}, rng);
    for (size_t i = 0; i < a.data.size(); ++i)
      if (std::abs(a.data[i] - b.data[i]) < 0.05) b.data[i] += 0.1;
    TensorD w = TensorD::randn({6}, rng);
    return finite_diff_check(
        [&](GraphD& g, GraphD::Var x) { return weighted_sum(g, g.min_elem(x, g.constant(b)), w); }, a);
  });
  add_case("straight-through", [](Rng& rng) {
    // Analytic path goes through the hard sample; the reference differentiates
    // the soft path, which is what the estimator's backward promises to match.
    TensorD a = TensorD::randn({4}, rng);
    TensorD w = TensorD::randn({4}, rng);
    auto soft = [&](GraphD& g, GraphD::Var x) {
      return weighted_sum(g, g.softmax_rows(x), w);
    };
    auto hard = [&](GraphD& g, GraphD::Var x) {
      return weighted_sum(g, g.st_hard_rows(g.softmax_rows(x)), w);
    };
    return fd_check_split(hard, soft, a, 1e-5);
  });

  return results;
}

}  // namespace gradcheck_detail

// Model-level cases are appended by model_gradcheck_cases (gradcheck_model.cpp).
std::vector<GradCheckResult> model_gradcheck_cases(uint64_t seed);

std::vector<GradCheckResult> run_gradcheck_suite(uint64_t seed, int instances) {
  auto results = gradcheck_detail::op_cases(seed, instances);

  // Negative control: a wrong gradient rule must be flagged loudly. The
  // analytic path is deliberately scaled; pass condition is a LARGE error.
  {
    Rng rng(Rng::derive_seed(seed, 9999));
    TensorD a = TensorD::randn({5}, rng);
    TensorD w = TensorD::randn({5}, rng);
    auto good = [&](GraphD& g, GraphD::Var x) {
      return g.reduce_sum(g.mul(g.gelu(x), g.constant(w)));
    };
    auto wrong = [&](GraphD& g, GraphD::Var x) {
      return g.scale(g.reduce_sum(g.mul(g.gelu(x), g.constant(w))), 1.05);
    };
    GradCheckResult r;
    r.name = "negative-control(wrong-rule-detected)";
    const double err = gradcheck_detail::fd_check_split_public(wrong, good, a, 1e-5);
    r.max_rel_err = err > 1e-2 ? 0.0 : 1.0;  // pass iff the checker saw the bug
    r.tolerance = 1e-4;
    results.push_back(r);
  }

  for (auto& r : model_gradcheck_cases(seed)) results.push_back(r);
  return results;
}

}  // namespace unigrid
