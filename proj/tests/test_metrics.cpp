#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "arns/metrics.hpp"
#include "oracles.hpp"

using namespace arns;

namespace {

// Brute-force pixel counting at one threshold, straight from the definition.
struct Counts {
    std::int64_t tp = 0, fp = 0, fn = 0;
};
Counts brute_counts(const Tensor<double>& pred, const Tensor<double>& mask, int thr) {
    Counts c;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool positive = pred[i] > thr / 255.0;
        const bool fg = mask[i] >= 0.5;
        if (positive && fg) ++c.tp;
        else if (positive) ++c.fp;
        else if (fg) ++c.fn;
    }
    return c;
}

std::pair<double, double> brute_pr(const Tensor<double>& pred, const Tensor<double>& mask, int thr) {
    const Counts c = brute_counts(pred, mask, thr);
    const double p = (c.tp + c.fp == 0) ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    const double r = (c.tp + c.fn == 0) ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return {p, r};
}

Tensor<double> random_pred(std::mt19937_64& rng, int h = 8, int w = 8) {
    Tensor<double> t(Shape{1, h, w});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> quantized(0, 255);
    std::uniform_int_distribution<int> mode(0, 1);
    for (auto& v : t.vec()) v = mode(rng) ? unit(rng) : quantized(rng) / 255.0;
    return t;
}

Tensor<double> random_mask(std::mt19937_64& rng, int h = 8, int w = 8) {
    Tensor<double> t(Shape{1, h, w});
    std::uniform_int_distribution<int> bit(0, 1);
    for (auto& v : t.vec()) v = bit(rng);
    return t;
}

}  // namespace

TEST_CASE("pr_at_threshold trivial and convention cases") {
    Tensor<double> mask(Shape{1, 2, 2}, {1, 0, 1, 0});
    Tensor<double> perfect = mask;
    auto pr = pr_at_threshold(perfect, mask, 128);
    CHECK(pr.first == 1.0);
    CHECK(pr.second == 1.0);

    Tensor<double> zeros(Shape{1, 2, 2}, 0.0);
    auto pr2 = pr_at_threshold(zeros, mask, 128);
    CHECK(pr2.first == 1.0);  // nothing predicted positive
    CHECK(pr2.second == 0.0);

    Tensor<double> empty_mask(Shape{1, 2, 2}, 0.0);
    auto pr3 = pr_at_threshold(zeros, empty_mask, 128);
    CHECK(pr3.first == 1.0);
    CHECK(pr3.second == 1.0);  // empty mask convention

    Tensor<double> ones(Shape{1, 2, 2}, 1.0);
    auto pr4 = pr_at_threshold(ones, empty_mask, 128);
    CHECK(pr4.first == 0.0);
    CHECK(pr4.second == 1.0);

    Tensor<double> bad(Shape{1, 2, 3}, 0.0);
    CHECK_THROWS_AS(pr_at_threshold(bad, mask, 128), std::invalid_argument);
    CHECK_THROWS_AS(pr_at_threshold(perfect, mask, 256), std::invalid_argument);
}

TEST_CASE("pr_at_threshold and threshold_counts match brute force at all 256 thresholds") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> pred = random_pred(rng);
        Tensor<double> mask = random_mask(rng);
        const ThresholdCounts counts = threshold_counts(pred, mask);
        for (int thr = 0; thr < 256; ++thr) {
            const Counts expect = brute_counts(pred, mask, thr);
            REQUIRE(counts.tp[static_cast<std::size_t>(thr)] == expect.tp);
            REQUIRE(counts.fp[static_cast<std::size_t>(thr)] == expect.fp);
            REQUIRE(counts.mask_positive - counts.tp[static_cast<std::size_t>(thr)] == expect.fn);
            const auto got = pr_at_threshold(pred, mask, thr);
            const auto want = brute_pr(pred, mask, thr);
            REQUIRE(got.first == want.first);
            REQUIRE(got.second == want.second);
        }
    }
}

TEST_CASE("recall is non-increasing in the threshold") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> pred = random_pred(rng);
        Tensor<double> mask = random_mask(rng);
        double prev = 1.0;
        for (int thr = 0; thr < 256; ++thr) {
            const double r = pr_at_threshold(pred, mask, thr).second;
            CHECK(r <= prev + 1e-15);
            prev = r;
        }
    }
}

TEST_CASE("f_measure fixed points and direct evaluation") {
    for (double p : {0.0, 0.25, 0.5, 1.0}) CHECK(f_measure(p, p) == p);
    CHECK(f_measure(0.8, 0.0) == 0.0);
    CHECK(f_measure(0.0, 0.0) == 0.0);
    CHECK(std::abs(f_measure(0.9, 0.6) - 0.702 / 0.87) < 1e-12);
}

TEST_CASE("mae trivial cases and summation oracle") {
    Tensor<double> mask(Shape{1, 2, 2}, {1, 0, 0, 1});
    CHECK(mae(mask, mask) == 0.0);
    Tensor<double> ones(Shape{1, 2, 2}, 1.0);
    Tensor<double> zeros(Shape{1, 2, 2}, 0.0);
    CHECK(mae(ones, zeros) == 1.0);

    std::mt19937_64 rng(7);
    Tensor<double> pred = random_pred(rng, 4, 4);
    Tensor<double> m = random_mask(rng, 4, 4);
    double acc = 0.0;
    for (int i = 15; i >= 0; --i) acc += std::abs(pred[i] - m[i]);  // reversed order on purpose
    CHECK(std::abs(mae(pred, m) - acc / 16.0) < 1e-12);

    CHECK_THROWS_AS(mae(pred, zeros), std::invalid_argument);
}

TEST_CASE("evaluate_set on a single perfect prediction") {
    std::mt19937_64 rng(9);
    Tensor<double> mask = random_mask(rng);
    mask[0] = 1.0;  // nonempty
    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs{{mask, mask}};
    EvalReport rep = evaluate_set(pairs);
    CHECK(rep.max_f == 1.0);
    CHECK(rep.mae == 0.0);
    CHECK(rep.n_samples == 1);
    REQUIRE(rep.curve.size() == 256);
    for (const PrPoint& pt : rep.curve) {
        CHECK(pt.precision >= 0.0);
        CHECK(pt.precision <= 1.0);
        CHECK(pt.recall >= 0.0);
        CHECK(pt.recall <= 1.0);
    }
    CHECK(rep.max_f >= rep.mean_f);
}

TEST_CASE("evaluate_set is exactly invariant to duplication and permutation") {
    std::mt19937_64 rng(11);
    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs;
    for (int i = 0; i < 5; ++i) pairs.emplace_back(random_pred(rng), random_mask(rng));

    EvalReport base = evaluate_set(pairs);

    auto doubled = pairs;
    doubled.insert(doubled.end(), pairs.begin(), pairs.end());
    EvalReport dup = evaluate_set(doubled);
    CHECK(dup.max_f == base.max_f);
    CHECK(dup.max_f_threshold == base.max_f_threshold);
    CHECK(dup.mean_f == base.mean_f);
    CHECK(dup.mae == base.mae);
    for (int t = 0; t < 256; ++t) {
        REQUIRE(dup.curve[static_cast<std::size_t>(t)].precision ==
                base.curve[static_cast<std::size_t>(t)].precision);
        REQUIRE(dup.curve[static_cast<std::size_t>(t)].recall == base.curve[static_cast<std::size_t>(t)].recall);
    }

    auto shuffled = pairs;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[2]);
    EvalReport perm = evaluate_set(shuffled);
    CHECK(perm.max_f == base.max_f);
    CHECK(perm.mean_f == base.mean_f);
    CHECK(perm.mae == base.mae);
    for (int t = 0; t < 256; ++t) {
        REQUIRE(perm.curve[static_cast<std::size_t>(t)].precision ==
                base.curve[static_cast<std::size_t>(t)].precision);
    }
}

TEST_CASE("evaluate_set matches an independent single-pass reference") {
    std::mt19937_64 rng(13);
    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs;
    for (int i = 0; i < 5; ++i) pairs.emplace_back(random_pred(rng), random_mask(rng));
    EvalReport rep = evaluate_set(pairs);

    double want_max_f = 0.0, want_mean_f = 0.0;
    int want_arg = 0;
    for (int thr = 0; thr < 256; ++thr) {
        double psum = 0.0, rsum = 0.0;
        for (const auto& pr : pairs) {
            const auto v = brute_pr(pr.first, pr.second, thr);
            psum += v.first;
            rsum += v.second;
        }
        const double p = psum / static_cast<double>(pairs.size());
        const double r = rsum / static_cast<double>(pairs.size());
        CHECK(std::abs(rep.curve[static_cast<std::size_t>(thr)].precision - p) < 1e-12);
        CHECK(std::abs(rep.curve[static_cast<std::size_t>(thr)].recall - r) < 1e-12);
        const double f = (0.3 * p + r) == 0.0 ? 0.0 : 1.3 * p * r / (0.3 * p + r);
        want_mean_f += f;
        if (f > want_max_f) {
            want_max_f = f;
            want_arg = thr;
        }
    }
    want_mean_f /= 256.0;
    CHECK(std::abs(rep.max_f - want_max_f) < 1e-12);
    CHECK(rep.max_f_threshold == want_arg);
    CHECK(std::abs(rep.mean_f - want_mean_f) < 1e-12);

    double mae_sum = 0.0;
    for (const auto& pr : pairs) mae_sum += mae(pr.first, pr.second);
    CHECK(std::abs(rep.mae - mae_sum / static_cast<double>(pairs.size())) < 1e-12);
}

TEST_CASE("evaluate_set with threads matches single-threaded results exactly") {
    std::mt19937_64 rng(17);
    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs;
    for (int i = 0; i < 9; ++i) pairs.emplace_back(random_pred(rng), random_mask(rng));
    EvalReport a = evaluate_set(pairs, 1);
    EvalReport b = evaluate_set(pairs, 4);
    CHECK(a.max_f == b.max_f);
    CHECK(a.mae == b.mae);
    for (int t = 0; t < 256; ++t) {
        REQUIRE(a.curve[static_cast<std::size_t>(t)].precision == b.curve[static_cast<std::size_t>(t)].precision);
        REQUIRE(a.curve[static_cast<std::size_t>(t)].recall == b.curve[static_cast<std::size_t>(t)].recall);
    }
}

TEST_CASE("evaluate_set rejects an empty list; order_independent_mean basics") {
    std::vector<std::pair<Tensor<double>, Tensor<double>>> empty;
    CHECK_THROWS_AS(evaluate_set(empty), std::invalid_argument);

    CHECK(order_independent_mean({0.0, 1.0}) == 0.5);
    CHECK(order_independent_mean({1.0, 1.0, 1.0}) == 1.0);
    CHECK(std::abs(order_independent_mean({0.1, 0.2, 0.3}) - 0.2) < 1e-15);
    CHECK_THROWS_AS(order_independent_mean({}), std::invalid_argument);
    CHECK_THROWS_AS(order_independent_mean({1.5}), std::invalid_argument);
}

TEST_CASE("csv report has the documented layout") {
    std::mt19937_64 rng(19);
    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs{{random_pred(rng), random_mask(rng)}};
    EvalReport rep = evaluate_set(pairs);
    const auto path = std::filesystem::temp_directory_path() / "arns_metrics_report.csv";
    write_report_csv(rep, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "threshold,precision,recall,fmeasure");
    int rows = 0;
    std::vector<std::string> tail;
    while (std::getline(in, line)) {
        if (!line.empty() && !std::isdigit(static_cast<unsigned char>(line[0]))) tail.push_back(line);
        ++rows;
    }
    CHECK(rows == 256 + 5);
    REQUIRE(tail.size() == 5);
    CHECK(tail[0].rfind("max_f,", 0) == 0);
    CHECK(tail[1].rfind("max_f_threshold,", 0) == 0);
    CHECK(tail[2].rfind("mean_f,", 0) == 0);
    CHECK(tail[3].rfind("mae,", 0) == 0);
    CHECK(tail[4].rfind("n_samples,", 0) == 0);
}
