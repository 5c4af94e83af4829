#pragma once

#include <map>
#include <string>
#include <vector>

#include "ifss/error.hpp"
#include "ifss/tensor.hpp"

namespace ifss {

// Per-class intersection/union tallies over (prediction, truth) label grids;
// 255 marks ignored pixels.
struct ConfusionAccumulator {
  std::map<int, long long> intersection;
  std::map<int, long long> union_;
  long long pixels = 0;

  void add(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth) {
    require_same_shape(pred, truth, "confusion add");
    for (size_t i = 0; i < pred.size(); ++i) {
      const int t = truth[i];
      if (t == 255) continue;
      const int p = pred[i];
      ++pixels;
      if (p == t) {
        ++intersection[t];
        ++union_[t];
      } else {
        ++union_[t];
        ++union_[p];
      }
    }
  }
};

// Mean IoU over the given classes, as a fraction in [0,1]. Classes that never
// appear (zero union) are excluded from the mean; an empty mean is 0.
inline double compute_miou(const ConfusionAccumulator& acc, const std::vector<int>& class_set) {
  if (class_set.empty()) {
    throw Error::data("empty-class-set: mIoU needs at least one class");
  }
  double sum = 0;
  int counted = 0;
  for (int c : class_set) {
    auto it = acc.union_.find(c);
    if (it == acc.union_.end() || it->second == 0) continue;
    const auto ii = acc.intersection.find(c);
    const double inter = ii == acc.intersection.end() ? 0.0 : static_cast<double>(ii->second);
    sum += inter / static_cast<double>(it->second);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / counted;
}

// 2BN/(B+N); zero when both inputs are zero. Scale-consistent (fractions or
// percentages).
inline double harmonic_mean(double miou_b, double miou_n) {
  if (miou_b < 0 || miou_n < 0) {
    throw Error::data("harmonic mean inputs must be nonnegative, got " +
                      std::to_string(miou_b) + " and " + std::to_string(miou_n));
  }
  const double s = miou_b + miou_n;
  if (s == 0.0) return 0.0;
  return 2.0 * miou_b * miou_n / s;
}

}  // namespace ifss
