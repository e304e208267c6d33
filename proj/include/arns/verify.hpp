#ifndef ARNS_VERIFY_HPP
#define ARNS_VERIFY_HPP

#include <algorithm>
#include <string>
#include <vector>

#include "arns/attention.hpp"
#include "arns/gradcheck.hpp"
#include "arns/network.hpp"
#include "arns/ops.hpp"
#include "arns/rcl.hpp"

namespace arns {

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

constexpr double kGradTolerance = 1e-4;

/// Finite-difference gradcheck of the gated-sum of the full model output on a
/// small 32×32 configuration, sampling random entries across up to
/// `max_params` parameter tensors. Returns the max relative error.
inline double model_gradcheck(std::uint64_t seed, int max_params = 24, int entries_per_param = 3) {
    NetConfig cfg;
    cfg.input_size = 32;
    cfg.width_mult = 0.0625;
    cfg.rcl_channels = 8;
    cfg.rcl_time_steps = 2;
    cfg.decoder_channels = 8;
    cfg.seed = seed;
    SaliencyModel<double> model(cfg);
    model.init_parameters(seed);

    std::mt19937_64 rng(mix_seed(seed, 0xA77));
    // Nonzero attention gains so every branch carries gradient.
    std::uniform_real_distribution<double> gdist(0.3, 0.7);
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") p->value[0] = gdist(rng);
    }
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -1.0, 1.0);
    // Small probe magnitude keeps the loss near 1e-2 so the cancellation
    // noise of central differences stays well below the 1e-8 error floor on
    // branches whose true gradient is essentially zero.
    Tensor<double> probe = random_uniform<double>(Shape{1, 32, 32}, rng, -1e-3, 1e-3);

    auto eval = [&]() -> double {
        Tape<double> tape;
        return weighted_sum(model.forward(tape, image), probe).value()[0];
    };

    model.zero_gradients();
    {
        Tape<double> tape;
        Var<double> loss = weighted_sum(model.forward(tape, image), probe);
        tape.backward(loss);
    }

    std::vector<Parameter<double>*> sampled = model.parameters();
    std::shuffle(sampled.begin(), sampled.end(), rng);
    if (static_cast<int>(sampled.size()) > max_params) sampled.resize(static_cast<std::size_t>(max_params));

    const double eps = 1e-5;
    double max_rel = 0.0;
    for (Parameter<double>* p : sampled) {
        std::uniform_int_distribution<std::int64_t> pick(0, p->value.numel() - 1);
        for (int e = 0; e < entries_per_param; ++e) {
            const std::int64_t i = pick(rng);
            const double ga = p->grad[i];
            const double saved = p->value[i];
            p->value[i] = saved + eps;
            const double f_plus = eval();
            p->value[i] = saved - eps;
            const double f_minus = eval();
            p->value[i] = saved;
            const double gn = (f_plus - f_minus) / (2.0 * eps);
            const double rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    model.zero_gradients();
    return max_rel;
}

/// Gradcheck of every primitive layer, the attention module, the RCL unit
/// (two time steps) and the 32×32 model, all in 64-bit precision. `tamper`
/// corrupts the first analytic gradient so harness sensitivity can be
/// demonstrated.
inline std::vector<CheckResult> gradient_suite(std::uint64_t seed, double tamper = 0.0) {
    std::vector<CheckResult> results;
    std::mt19937_64 rng(seed);
    auto param = [&](const char* name, Shape shape) {
        return Parameter<double>(name, random_uniform<double>(shape, rng, -1.0, 1.0));
    };
    auto param_off_zero = [&](const char* name, Shape shape) {
        Tensor<double> t(shape);
        std::uniform_real_distribution<double> mag(0.2, 1.0);
        std::uniform_int_distribution<int> sign(0, 1);
        for (auto& v : t.vec()) v = (sign(rng) ? 1.0 : -1.0) * mag(rng);
        return Parameter<double>(name, std::move(t));
    };
    auto run = [&](const std::string& name, const std::function<Var<double>(Tape<double>&)>& build,
                   std::vector<Parameter<double>*> params) {
        const double t = results.empty() ? tamper : 0.0;
        GradCheckReport rep = gradcheck(build, params, 1e-5, t);
        results.push_back(CheckResult{name, rep.max_rel_err, rep.max_rel_err < kGradTolerance});
    };

    {
        Parameter<double> x = param("x", Shape{2, 4, 4});
        Parameter<double> w = param("w", Shape{3, 2, 3, 3});
        Parameter<double> b = param("b", Shape{3});
        Tensor<double> probe = random_uniform<double>(Shape{3, 4, 4}, rng);
        run("conv2d", [&](Tape<double>& t) { return weighted_sum(conv2d(t.use(x), w, &b, 1, 1), probe); },
            {&x, &w, &b});
    }
    {
        Parameter<double> x = param("x", Shape{2, 4, 4});
        Parameter<double> w = param("w", Shape{2, 3, 4, 4});
        Tensor<double> probe = random_uniform<double>(Shape{3, 8, 8}, rng);
        run("conv_transpose2d",
            [&](Tape<double>& t) { return weighted_sum(conv_transpose2d(t.use(x), w), probe); }, {&x, &w});
    }
    {
        Parameter<double> x = param_off_zero("x", Shape{2, 4, 4});
        Tensor<double> probe = random_uniform<double>(Shape{2, 2, 2}, rng);
        run("maxpool2x2", [&](Tape<double>& t) { return weighted_sum(maxpool2x2(t.use(x)), probe); }, {&x});
    }
    {
        Parameter<double> x = param_off_zero("x", Shape{2, 4, 4});
        Tensor<double> probe = random_uniform<double>(Shape{2, 4, 4}, rng);
        run("relu", [&](Tape<double>& t) { return weighted_sum(relu(t.use(x)), probe); }, {&x});
    }
    {
        Parameter<double> x = param("x", Shape{5, 3, 3});
        Tensor<double> probe = random_uniform<double>(Shape{5, 3, 3}, rng);
        run("lrn", [&](Tape<double>& t) { return weighted_sum(lrn(t.use(x), 0.2, 0.75, 5), probe); }, {&x});
    }
    {
        Parameter<double> x = param("x", Shape{4, 4});
        Tensor<double> probe = random_uniform<double>(Shape{4, 4}, rng);
        run("softmax_cols", [&](Tape<double>& t) { return weighted_sum(softmax_cols(t.use(x)), probe); }, {&x});
    }
    {
        Parameter<double> x = param("x", Shape{2, 3, 3});
        Tensor<double> probe = random_uniform<double>(Shape{2, 3, 3}, rng);
        run("sigmoid", [&](Tape<double>& t) { return weighted_sum(sigmoid(t.use(x)), probe); }, {&x});
    }
    {
        Parameter<double> a = param("a", Shape{3, 4});
        Parameter<double> b = param("b", Shape{4, 2});
        Tensor<double> probe = random_uniform<double>(Shape{3, 2}, rng);
        run("matmul", [&](Tape<double>& t) { return weighted_sum(matmul(t.use(a), t.use(b)), probe); },
            {&a, &b});
    }
    {
        SelfAttention<double> att = SelfAttention<double>::make("att", 8, 8);
        fill_uniform(att.key_kernel.value, rng, -0.5, 0.5);
        fill_uniform(att.query_kernel.value, rng, -0.5, 0.5);
        fill_uniform(att.value_kernel.value, rng, -0.5, 0.5);
        att.gain.value[0] = 0.6;
        Parameter<double> x = param("x", Shape{8, 2, 2});
        Tensor<double> probe = random_uniform<double>(Shape{8, 2, 2}, rng);
        run("attention", [&](Tape<double>& t) { return weighted_sum(att.forward(t.use(x)), probe); },
            {&x, &att.key_kernel, &att.query_kernel, &att.value_kernel, &att.gain});
    }
    {
        RclUnit<double> unit = RclUnit<double>::make("rcl", 2, 2, 2);
        fill_uniform(unit.feed_kernel.value, rng, -0.5, 0.5);
        fill_uniform(unit.recur_kernel.value, rng, -0.5, 0.5);
        fill_uniform(unit.bias.value, rng, -0.5, 0.5);
        Parameter<double> u = param("u", Shape{2, 4, 4});
        Tensor<double> probe = random_uniform<double>(Shape{2, 4, 4}, rng);
        run("rcl_t2", [&](Tape<double>& t) { return weighted_sum(unit.forward(t.use(u)), probe); },
            {&u, &unit.feed_kernel, &unit.recur_kernel, &unit.bias});
    }
    {
        const double err = model_gradcheck(seed);
        results.push_back(CheckResult{"model_32x32", err, err < kGradTolerance});
    }
    return results;
}

}  // namespace arns

#endif  // ARNS_VERIFY_HPP
