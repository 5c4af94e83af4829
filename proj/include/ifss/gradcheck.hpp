#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ifss/autograd.hpp"
#include "ifss/error.hpp"
#include "ifss/rng.hpp"
#include "ifss/tensor.hpp"

namespace ifss {

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  bool passed = false;
  uint64_t seed = 0;
};

// What a grad-check builder hands back: one scalar root plus the parameter
// leaves whose gradients are under test.
template <typename T>
struct GradCheckModel {
  Node<T>* root = nullptr;
  std::vector<Node<T>*> params;
};

namespace gradcheck {

// Draws rounded through float so the float and double instantiations of a
// builder evaluate at the exact same point.
template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(static_cast<float>(rng.uniform(lo, hi)));
  }
  return t;
}

// Same, but keeps every element at least `margin` away from zero (for ops
// with a kink there).
template <typename T>
Tensor<T> random_tensor_away_from_zero(Rng& rng, std::vector<int> shape, double margin,
                                       double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) {
    double v = rng.uniform(margin, hi);
    if (rng.uniform() < 0.5) v = -v;
    t[i] = static_cast<T>(static_cast<float>(v));
  }
  return t;
}

}  // namespace gradcheck

// Compares reverse-mode gradients (float path) against central finite
// differences of a 64-bit shadow evaluation of the same builder, step
// h = 1e-3. Builders must be deterministic given the seed. Large parameters
// are probed on a seeded element subset (cap per tensor) to keep the check
// affordable; the error metric is max(|g_a - g_fd| / max(|g_a|,|g_fd|,1e-8)).
template <typename Builder>
GradReport grad_check(std::string op_name, Builder&& build, uint64_t seed, double tol,
                      int max_probes_per_param = 40) {
  GradReport report{std::move(op_name), 0.0, false, seed};

  std::vector<std::vector<double>> analytic;
  {
    Graph<float> gf;
    Rng rng(seed);
    GradCheckModel<float> model = build(gf, rng);
    gf.backward(model.root);
    for (Node<float>* p : model.params) {
      Tensor<float> gr = grad_or_zero(p);
      std::vector<double> v(gr.size());
      for (size_t i = 0; i < gr.size(); ++i) v[i] = static_cast<double>(gr[i]);
      analytic.push_back(std::move(v));
    }
  }

  Graph<double> gd;
  Rng rng(seed);
  GradCheckModel<double> model = build(gd, rng);
  if (model.params.size() != analytic.size()) {
    throw Error::numeric("grad_check builder is not deterministic: parameter count differs "
                         "between float and double evaluations");
  }
  if (!std::isfinite(model.root->value[0])) {
    throw Error::numeric("non-finite probe: loss is non-finite at the unperturbed point");
  }

  const double h = 1e-3;
  double max_rel = 0.0;
  for (size_t pi = 0; pi < model.params.size(); ++pi) {
    Node<double>* p = model.params[pi];
    const size_t n = p->value.size();
    std::vector<int> probe_idx;
    if (n <= static_cast<size_t>(max_probes_per_param)) {
      probe_idx.resize(n);
      for (size_t i = 0; i < n; ++i) probe_idx[i] = static_cast<int>(i);
    } else {
      Rng probe_rng(derive_seed(report.seed, "probe", pi));
      probe_idx = probe_rng.sample_without_replacement(static_cast<int>(n), max_probes_per_param);
    }
    for (int k : probe_idx) {
      const double orig = p->value[static_cast<size_t>(k)];
      p->value[static_cast<size_t>(k)] = orig + h;
      gd.recompute();
      const double fp = model.root->value[0];
      p->value[static_cast<size_t>(k)] = orig - h;
      gd.recompute();
      const double fm = model.root->value[0];
      p->value[static_cast<size_t>(k)] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw Error::numeric("non-finite probe: parameter " + std::to_string(pi) + " element " +
                             std::to_string(k) + " of op " + report.op_name);
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double ga = analytic[pi][static_cast<size_t>(k)];
      const double rel =
          std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }

  report.max_rel_error = max_rel;
  report.passed = max_rel < tol;
  return report;
}

}  // namespace ifss
