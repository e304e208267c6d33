#ifndef ARNS_METRICS_HPP
#define ARNS_METRICS_HPP

#include <array>
#include <filesystem>
#include <utility>
#include <vector>

#include "arns/tensor.hpp"

namespace arns {

constexpr int kNumThresholds = 256;

struct PrPoint {
    int threshold = 0;
    double precision = 0.0;
    double recall = 0.0;
};

struct EvalReport {
    std::vector<PrPoint> curve;  // one point per threshold 0..255
    double max_f = 0.0;
    int max_f_threshold = 0;
    double mean_f = 0.0;
    double mae = 0.0;
    int n_samples = 0;
};

/// Precision/recall after binarizing pred at thr/255 (a pixel is positive iff
/// pred > thr/255). Precision is 1 when nothing is predicted positive; recall
/// is 1 when the mask is empty.
std::pair<double, double> pr_at_threshold(const Tensor<double>& pred, const Tensor<double>& mask, int threshold);

/// Weighted harmonic mean (1+beta2)·P·R / (beta2·P + R); 0 when the
/// denominator is 0.
double f_measure(double precision, double recall, double beta2 = 0.3);

/// Mean absolute pixel difference between a continuous map and a binary mask.
double mae(const Tensor<double>& pred, const Tensor<double>& mask);

/// Per-threshold positive-pixel counts for one sample.
struct ThresholdCounts {
    std::array<std::int64_t, kNumThresholds> tp{};
    std::array<std::int64_t, kNumThresholds> fp{};
    std::int64_t mask_positive = 0;
};
ThresholdCounts threshold_counts(const Tensor<double>& pred, const Tensor<double>& mask);

/// Full protocol over a prediction set: per-threshold precision/recall
/// averaged over samples, F computed from the averaged rates, max/mean F, and
/// set MAE. Reductions are order-independent.
EvalReport evaluate_set(const std::vector<std::pair<Tensor<double>, Tensor<double>>>& pairs, int threads = 1);

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);

/// Mean of values in [0,1] that is exactly invariant under permutation and
/// duplication of the input (fixed-point accumulation in 128-bit integers).
double order_independent_mean(const std::vector<double>& values);

}  // namespace arns

#endif  // ARNS_METRICS_HPP
