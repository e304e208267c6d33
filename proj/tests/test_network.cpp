#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "arns/network.hpp"
#include "arns/verify.hpp"
#include "oracles.hpp"

using namespace arns;

namespace {

NetConfig tiny_config(std::uint64_t seed = 9) {
    NetConfig cfg;
    cfg.input_size = 32;
    cfg.width_mult = 0.0625;
    cfg.rcl_channels = 8;
    cfg.rcl_time_steps = 2;
    cfg.decoder_channels = 8;
    cfg.seed = seed;
    return cfg;
}

Parameter<double> fetch(SaliencyModel<double>& m, const std::string& name) {
    Parameter<double>* p = m.find_parameter(name);
    REQUIRE(p != nullptr);
    return Parameter<double>(name + ".copy", p->value);
}

SelfAttention<double> fetch_attention(SaliencyModel<double>& m, const std::string& prefix, int channels) {
    SelfAttention<double> att = SelfAttention<double>::make(prefix + ".copy", channels,
                                                            m.config().attention_reduction,
                                                            m.config().attention_position_cap);
    att.key_kernel.value = m.find_parameter(prefix + ".key")->value;
    att.query_kernel.value = m.find_parameter(prefix + ".query")->value;
    att.value_kernel.value = m.find_parameter(prefix + ".value")->value;
    att.gain.value = m.find_parameter(prefix + ".gain")->value;
    return att;
}

RclUnit<double> fetch_rcl(SaliencyModel<double>& m, const std::string& prefix) {
    const NetConfig& cfg = m.config();
    RclUnit<double> unit =
        RclUnit<double>::make(prefix + ".copy", cfg.rcl_channels, cfg.rcl_channels, cfg.rcl_time_steps);
    unit.feed_kernel.value = m.find_parameter(prefix + ".feed")->value;
    unit.recur_kernel.value = m.find_parameter(prefix + ".recur")->value;
    unit.bias.value = m.find_parameter(prefix + ".bias")->value;
    return unit;
}

// Straight-line recomputation of the backbone from named parameters.
struct BackboneRef {
    Tensor<double> l2, l3, l4, s5;
};
BackboneRef backbone_reference(SaliencyModel<double>& m, const Tensor<double>& image) {
    static constexpr int kDepths[5] = {2, 2, 3, 3, 3};
    Tape<double> tape;
    Var<double> x = tape.input(image);
    BackboneRef ref;
    std::vector<Parameter<double>> owned;  // keep alive during the pass
    owned.reserve(26);
    for (int b = 0; b < 5; ++b) {
        for (int l = 0; l < kDepths[b]; ++l) {
            const std::string base = "backbone.conv" + std::to_string(b + 1) + "_" + std::to_string(l + 1);
            owned.push_back(fetch(m, base + ".weight"));
            Parameter<double>& w = owned.back();
            owned.push_back(fetch(m, base + ".bias"));
            Parameter<double>& bias = owned.back();
            x = relu(conv2d(x, w, &bias, 1, 1));
        }
        if (b == 1) ref.l2 = x.value();
        if (b == 2) ref.l3 = x.value();
        if (b == 3) ref.l4 = x.value();
        if (b == 4) ref.s5 = x.value();
        if (b < 4) x = maxpool2x2(x);
    }
    return ref;
}

}  // namespace

TEST_CASE("desk-scale shape ladder: spatial (32,16,8,4), channels (16,32,64,64)") {
    NetConfig cfg;  // defaults: 64, width 0.125
    SaliencyModel<double> model(cfg);
    model.init_parameters(1);
    Tape<double> tape;
    std::mt19937_64 rng(2);
    Var<double> in = tape.input(random_uniform<double>(Shape{3, 64, 64}, rng));
    auto sides = model.backbone_forward(in);
    CHECK(sides.l2.value().shape() == Shape{16, 32, 32});
    CHECK(sides.l3.value().shape() == Shape{32, 16, 16});
    CHECK(sides.l4.value().shape() == Shape{64, 8, 8});
    CHECK(sides.s5.value().shape() == Shape{64, 4, 4});
    Var<double> out = model.arn_forward(sides);
    CHECK(out.value().shape() == Shape{1, 64, 64});
}

TEST_CASE("backbone matches the straight-line composition of primitives") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(3);
    std::mt19937_64 rng(4);
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -1.0, 1.0);

    Tape<double> tape;
    auto sides = model.backbone_forward(tape.input(image));
    BackboneRef ref = backbone_reference(model, image);
    CHECK(oracles::max_abs_diff(sides.l2.value(), ref.l2) == 0.0);
    CHECK(oracles::max_abs_diff(sides.l3.value(), ref.l3) == 0.0);
    CHECK(oracles::max_abs_diff(sides.l4.value(), ref.l4) == 0.0);
    CHECK(oracles::max_abs_diff(sides.s5.value(), ref.s5) == 0.0);
}

TEST_CASE("zero-weight backbone propagates only biases") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(5);
    std::mt19937_64 rng(6);
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.rfind("backbone.", 0) == 0) {
            if (p->value.rank() == 4) p->value.fill(0.0);
            else fill_uniform(p->value, rng, -0.5, 0.5);
        }
    }
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng);
    Tape<double> tape;
    auto sides = model.backbone_forward(tape.input(image));

    // Each layer's output is relu(bias), so every side map is constant per
    // channel at the rectified bias of the block's last convolution.
    auto check_side = [&](const Tensor<double>& side, const std::string& conv) {
        const Tensor<double>& b = model.find_parameter(conv + ".bias")->value;
        const int C = side.extent(0);
        for (int c = 0; c < C; ++c) {
            const double expect = std::max(0.0, b[c]);
            for (int h = 0; h < side.extent(1); ++h) {
                for (int w = 0; w < side.extent(2); ++w) REQUIRE(side(c, h, w) == expect);
            }
        }
    };
    check_side(sides.l2.value(), "backbone.conv2_2");
    check_side(sides.l3.value(), "backbone.conv3_3");
    check_side(sides.l4.value(), "backbone.conv4_3");
    check_side(sides.s5.value(), "backbone.conv5_3");

    // And with zero biases as well, everything collapses to zero.
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.rfind("backbone.", 0) == 0) p->value.fill(0.0);
    }
    Tape<double> tape2;
    auto z = model.backbone_forward(tape2.input(image));
    for (std::int64_t i = 0; i < z.s5.value().numel(); ++i) CHECK(z.s5.value()[i] == 0.0);
}

TEST_CASE("full forward matches the module-level composition oracle") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(7);
    std::mt19937_64 rng(8);
    // Nonzero gains so the attention branches participate.
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") {
            fill_uniform(p->value, rng, 0.2, 0.8);
        }
    }
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -1.0, 1.0);

    Tape<double> t1;
    Tensor<double> got = model.forward(t1, image).value();

    const auto side_ch = model.side_channels();
    SelfAttention<double> att5 = fetch_attention(model, "arn.att5", side_ch[3]);
    Tape<double> t2;
    auto sides = model.backbone_forward(t2.input(image));
    Var<double> cur = att5.forward_with_pooling(sides.s5);
    const Var<double> taps[3] = {sides.l4, sides.l3, sides.l2};
    for (int i = 0; i < 3; ++i) {
        const std::string sn = std::to_string(4 - i);
        Parameter<double> up = fetch(model, "arn.up" + sn + ".weight");
        Parameter<double> aw = fetch(model, "arn.adapter" + sn + ".weight");
        Parameter<double> ab = fetch(model, "arn.adapter" + sn + ".bias");
        Parameter<double> fw = fetch(model, "arn.fuse" + sn + ".weight");
        Parameter<double> fb = fetch(model, "arn.fuse" + sn + ".bias");
        RclUnit<double> rcl = fetch_rcl(model, "arn.rcl" + sn);
        SelfAttention<double> att = fetch_attention(model, "arn.att" + sn, model.config().decoder_channels);

        Var<double> upsampled = conv_transpose2d(cur, up);
        Var<double> enhanced = rcl.forward(relu(conv2d(taps[i], aw, &ab, 1, 1)));
        Var<double> fused = relu(conv2d(concat_channels(upsampled, enhanced), fw, &fb, 1, 1));
        cur = att.forward_with_pooling(fused);
    }
    Parameter<double> rw = fetch(model, "arn.readout.weight");
    Parameter<double> rb = fetch(model, "arn.readout.bias");
    Tensor<double> expect = upsample_bilinear_x2(sigmoid(conv2d(cur, rw, &rb, 1, 0))).value();

    CHECK(oracles::max_abs_diff(got, expect) == 0.0);
}

TEST_CASE("attention-ablated model is bitwise identical at initialization") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(11);  // all gains start at 0
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -1.0, 1.0);
        Tape<double> a, b;
        Tensor<double> with_attention = model.forward(a, image).value();
        Tensor<double> ablated = model.forward(b, image, /*ablate_attention=*/true).value();
        CHECK(oracles::max_abs_diff(with_attention, ablated) == 0.0);
    }
}

TEST_CASE("outputs stay in [0,1] and repeat runs are bitwise identical") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(13);
    std::mt19937_64 rng(14);
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") {
            fill_uniform(p->value, rng, -0.5, 0.5);
        }
    }
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -50.0, 50.0);
        Tape<double> a;
        Tensor<double> out = model.forward(a, image).value();
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            REQUIRE(out[i] >= 0.0);
            REQUIRE(out[i] <= 1.0);
        }
        if (trial == 0) {
            Tape<double> b;
            REQUIRE(oracles::max_abs_diff(model.forward(b, image).value(), out) == 0.0);
        }
    }
}

TEST_CASE("initialization: zero biases, zero gains, seed-reproducible") {
    SaliencyModel<double> m1(tiny_config());
    m1.init_parameters(21);
    for (Parameter<double>* p : m1.parameters()) {
        if (p->value.rank() != 4) {
            for (std::int64_t i = 0; i < p->value.numel(); ++i) REQUIRE(p->value[i] == 0.0);
        } else {
            // Uniform fan-based bounds.
            const double bound =
                std::sqrt(6.0 / (static_cast<double>(p->value.extent(0) + p->value.extent(1)) *
                                 p->value.extent(2) * p->value.extent(3)));
            for (std::int64_t i = 0; i < p->value.numel(); ++i) {
                REQUIRE(std::abs(p->value[i]) <= bound);
            }
        }
    }

    SaliencyModel<double> m2(tiny_config());
    m2.init_parameters(21);
    auto& pa = m1.parameters();
    auto& pb = m2.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(oracles::max_abs_diff(pa[i]->value, pb[i]->value) == 0.0);
    }

    SaliencyModel<double> m3(tiny_config());
    m3.init_parameters(22);
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (oracles::max_abs_diff(pa[i]->value, m3.parameters()[i]->value) > 0.0) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("parameter names are unique and resolvable") {
    SaliencyModel<double> model(tiny_config());
    std::set<std::string> names;
    for (Parameter<double>* p : model.parameters()) {
        CHECK(names.insert(p->name).second);
        CHECK(model.find_parameter(p->name) == p);
    }
    CHECK(model.find_parameter("no.such.parameter") == nullptr);
}

TEST_CASE("gradient reaches every parameter, and the gain even at zero") {
    SaliencyModel<double> model(tiny_config(31));
    model.init_parameters(31);
    std::mt19937_64 rng(32);
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng, -1.0, 1.0);
    Tensor<double> probe = random_uniform<double>(Shape{1, 32, 32}, rng);

    // At initialization the gains are 0 yet they receive gradient through the
    // context path.
    {
        Tape<double> tape;
        Var<double> loss = weighted_sum(model.forward(tape, image), probe);
        tape.backward(loss);
        for (Parameter<double>* p : model.parameters()) {
            if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") {
                CHECK(std::abs(p->grad[0]) > 0.0);
            }
        }
        model.zero_gradients();
    }

    // With nonzero gains every trainable parameter sees gradient.
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") {
            fill_uniform(p->value, rng, 0.2, 0.8);
        }
    }
    Tape<double> tape;
    Var<double> loss = weighted_sum(model.forward(tape, image), probe);
    tape.backward(loss);
    for (Parameter<double>* p : model.parameters()) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < p->grad.numel(); ++i) norm += p->grad[i] * p->grad[i];
        CHECK_MESSAGE(norm > 0.0, p->name);
    }
}

TEST_CASE("a tight attention cap routes large stages through pooling") {
    NetConfig cfg = tiny_config();
    cfg.attention_position_cap = 16;
    SaliencyModel<double> model(cfg);
    model.init_parameters(41);
    std::mt19937_64 rng(42);
    for (Parameter<double>* p : model.parameters()) {
        if (p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain") {
            fill_uniform(p->value, rng, 0.2, 0.8);
        }
    }
    Tensor<double> image = random_uniform<double>(Shape{3, 32, 32}, rng);
    Tape<double> tape;
    Tensor<double> out = model.forward(tape, image).value();
    CHECK(out.shape() == Shape{1, 32, 32});
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out[i] >= 0.0);
        CHECK(out[i] <= 1.0);
    }
}

TEST_CASE("invalid inputs are rejected with diagnostics") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(51);
    Tape<double> tape;
    std::mt19937_64 rng(52);
    CHECK_THROWS_AS(model.forward(tape, random_uniform<double>(Shape{3, 16, 16}, rng)),
                    std::invalid_argument);

    Tensor<double> nan_image(Shape{3, 32, 32}, 0.0);
    nan_image[0] = std::numeric_limits<double>::quiet_NaN();
    Tape<double> tape2;
    CHECK_THROWS_AS(model.forward(tape2, nan_image), std::invalid_argument);

    // Overflow from finite inputs trips the per-stage finiteness assertion.
    model.find_parameter("backbone.conv1_1.weight")->value.fill(1e308);
    Tensor<double> ones_image(Shape{3, 32, 32}, 1.0);
    Tape<double> tape3;
    CHECK_THROWS_WITH_AS(model.forward(tape3, ones_image), doctest::Contains("backbone.conv1_1"),
                         std::runtime_error);

    NetConfig bad;
    bad.input_size = 40;  // not a multiple of 16
    auto build_bad = [&]() { SaliencyModel<double> m(bad); };
    CHECK_THROWS_AS(build_bad(), std::invalid_argument);
}

TEST_CASE("misaligned decoder stages are rejected with the stage identifier") {
    SaliencyModel<double> model(tiny_config());
    model.init_parameters(61);
    std::mt19937_64 rng(62);
    Tape<double> tape;
    auto sides = model.backbone_forward(tape.input(random_uniform<double>(Shape{3, 32, 32}, rng)));
    // Right channel count for the l4 tap, wrong spatial extents.
    const int l4_ch = model.side_channels()[2];
    SaliencyModel<double>::SideOutputs bogus = sides;
    bogus.l4 = tape.input(random_uniform<double>(Shape{l4_ch, 2, 2}, rng));
    CHECK_THROWS_WITH_AS(model.arn_forward(bogus), doctest::Contains("arn.stage4"), std::runtime_error);
}

TEST_CASE("model-level gradcheck on the 32x32 configuration") {
    const double err = model_gradcheck(77, /*max_params=*/8, /*entries_per_param=*/2);
    CHECK(err < 1e-4);
}
