#include "arns/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

namespace arns {

namespace {

void check_pair(const Tensor<double>& pred, const Tensor<double>& mask, const char* op) {
    if (!pred.same_shape(mask)) {
        throw std::invalid_argument(std::string(op) + ": prediction shape " + shape_str(pred.shape()) +
                                    " does not match mask shape " + shape_str(mask.shape()));
    }
}

// Largest threshold t in [0,255] for which pred > t/255, or -1 if none.
// The pixel is predicted positive exactly for thresholds 0..t.
int max_positive_threshold(double p) {
    int t = static_cast<int>(std::floor(p * 255.0));
    if (t > 255) t = 255;
    if (t < -1) t = -1;
    while (t >= 0 && !(p > t / 255.0)) --t;
    while (t < 255 && p > (t + 1) / 255.0) ++t;
    return t;
}

}  // namespace

ThresholdCounts threshold_counts(const Tensor<double>& pred, const Tensor<double>& mask) {
    check_pair(pred, mask, "threshold_counts");
    // Histogram of per-pixel cutoff thresholds, bucketed by t+1 in [0,256],
    // split by mask label; suffix sums give TP/FP for every threshold.
    std::array<std::int64_t, kNumThresholds + 1> hist_fg{};
    std::array<std::int64_t, kNumThresholds + 1> hist_bg{};
    ThresholdCounts counts;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const int t = max_positive_threshold(pred[i]);
        if (mask[i] >= 0.5) {
            ++counts.mask_positive;
            ++hist_fg[static_cast<std::size_t>(t + 1)];
        } else {
            ++hist_bg[static_cast<std::size_t>(t + 1)];
        }
    }
    std::int64_t tp = 0, fp = 0;
    for (int thr = kNumThresholds - 1; thr >= 0; --thr) {
        tp += hist_fg[static_cast<std::size_t>(thr + 1)];
        fp += hist_bg[static_cast<std::size_t>(thr + 1)];
        counts.tp[static_cast<std::size_t>(thr)] = tp;
        counts.fp[static_cast<std::size_t>(thr)] = fp;
    }
    return counts;
}

std::pair<double, double> pr_at_threshold(const Tensor<double>& pred, const Tensor<double>& mask, int threshold) {
    check_pair(pred, mask, "pr_at_threshold");
    if (threshold < 0 || threshold > 255) {
        throw std::invalid_argument("pr_at_threshold: threshold must be in 0..255");
    }
    const double cut = threshold / 255.0;
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool pos = pred[i] > cut;
        const bool fg = mask[i] >= 0.5;
        if (pos && fg) ++tp;
        else if (pos) ++fp;
        else if (fg) ++fn;
    }
    const double precision = (tp + fp == 0) ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = (tp + fn == 0) ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    return {precision, recall};
}

double f_measure(double precision, double recall, double beta2) {
    const double denom = beta2 * precision + recall;
    if (denom == 0.0) return 0.0;
    return (1.0 + beta2) * precision * recall / denom;
}

double mae(const Tensor<double>& pred, const Tensor<double>& mask) {
    check_pair(pred, mask, "mae");
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) acc += std::abs(pred[i] - mask[i]);
    return acc / static_cast<double>(pred.numel());
}

double order_independent_mean(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("order_independent_mean: empty input");
    // Values are in [0,1]; v * 2^62 is an exact power-of-two scaling, and the
    // truncated fixed-point summands add exactly in 128-bit integers, so the
    // result cannot depend on ordering. The truncation error is below 2^-62.
    unsigned __int128 acc = 0;
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("order_independent_mean: value outside [0,1]");
        }
        acc += static_cast<unsigned __int128>(v * 0x1p62);
    }
    return static_cast<double>(acc) / (static_cast<double>(values.size()) * 0x1p62);
}

EvalReport evaluate_set(const std::vector<std::pair<Tensor<double>, Tensor<double>>>& pairs, int threads) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_set: empty prediction set");
    const std::size_t n = pairs.size();

    std::vector<ThresholdCounts> counts(n);
    std::vector<double> maes(n);
    auto worker = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            counts[i] = threshold_counts(pairs[i].first, pairs[i].second);
            maes[i] = mae(pairs[i].first, pairs[i].second);
        }
    };
    if (threads <= 1 || n < 2) {
        worker(0, n);
    } else {
        const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + nt - 1) / nt;
        for (std::size_t t = 0; t < nt; ++t) {
            const std::size_t b = t * chunk;
            const std::size_t e = std::min(n, b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }

    EvalReport report;
    report.n_samples = static_cast<int>(n);
    report.curve.resize(kNumThresholds);
    std::vector<double> precs(n), recs(n);
    double f_sum = 0.0;
    for (int thr = 0; thr < kNumThresholds; ++thr) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::int64_t tp = counts[i].tp[static_cast<std::size_t>(thr)];
            const std::int64_t fp = counts[i].fp[static_cast<std::size_t>(thr)];
            const std::int64_t fn = counts[i].mask_positive - tp;
            precs[i] = (tp + fp == 0) ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
            recs[i] = (tp + fn == 0) ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        }
        PrPoint& pt = report.curve[static_cast<std::size_t>(thr)];
        pt.threshold = thr;
        pt.precision = order_independent_mean(precs);
        pt.recall = order_independent_mean(recs);
        const double f = f_measure(pt.precision, pt.recall);
        f_sum += f;
        if (f > report.max_f) {
            report.max_f = f;
            report.max_f_threshold = thr;
        }
    }
    report.mean_f = f_sum / kNumThresholds;
    report.mae = order_independent_mean(maes);
    return report;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "threshold,precision,recall,fmeasure\n";
    char buf[160];
    for (const PrPoint& pt : report.curve) {
        const double f = f_measure(pt.precision, pt.recall);
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g\n", pt.threshold, pt.precision, pt.recall, f);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "max_f,%.10g\n", report.max_f);
    out << buf;
    std::snprintf(buf, sizeof(buf), "max_f_threshold,%d\n", report.max_f_threshold);
    out << buf;
    std::snprintf(buf, sizeof(buf), "mean_f,%.10g\n", report.mean_f);
    out << buf;
    std::snprintf(buf, sizeof(buf), "mae,%.10g\n", report.mae);
    out << buf;
    std::snprintf(buf, sizeof(buf), "n_samples,%d\n", report.n_samples);
    out << buf;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace arns
