#ifndef ARNS_NETWORK_HPP
#define ARNS_NETWORK_HPP

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "arns/attention.hpp"
#include "arns/ops.hpp"
#include "arns/rcl.hpp"
#include "arns/tensor.hpp"

namespace arns {

/// Architecture hyperparameters. Defaults are the desk-scale configuration;
/// full_scale() matches the full-size layout (224 input, unscaled widths).
struct NetConfig {
    int input_size = 64;
    double width_mult = 0.125;
    int rcl_channels = 16;
    int rcl_time_steps = 3;
    int decoder_channels = 16;
    int attention_reduction = 8;
    int attention_position_cap = 4096;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_size < 16 || input_size % 16 != 0) {
            throw std::invalid_argument("NetConfig: input_size must be a positive multiple of 16, got " +
                                        std::to_string(input_size));
        }
        if (!(width_mult > 0.0 && width_mult <= 1.0)) {
            throw std::invalid_argument("NetConfig: width_mult must be in (0,1]");
        }
        if (rcl_channels < 1 || decoder_channels < 1) {
            throw std::invalid_argument("NetConfig: channel counts must be >= 1");
        }
        if (rcl_time_steps < 0) throw std::invalid_argument("NetConfig: rcl_time_steps must be >= 0");
        if (attention_reduction < 1) throw std::invalid_argument("NetConfig: attention_reduction must be >= 1");
        if (attention_position_cap < 1) throw std::invalid_argument("NetConfig: attention_position_cap must be >= 1");
    }

    int scaled(int base_channels) const {
        return std::max(1, static_cast<int>(std::llround(base_channels * width_mult)));
    }

    static NetConfig full_scale() {
        NetConfig c;
        c.input_size = 224;
        c.width_mult = 1.0;
        c.rcl_channels = 64;
        c.decoder_channels = 64;
        return c;
    }
};

/// The full saliency network: a VGG-style backbone with side outputs feeding
/// recurrent convolutional units, and a top-down decoder that repeatedly
/// upsamples, fuses and re-weights features with self-attention until the
/// finest stage, which is read out as a pixel-wise map in [0,1].
template <typename T>
class SaliencyModel {
public:
    struct SideOutputs {
        Var<T> l2, l3, l4, s5;
    };

    explicit SaliencyModel(NetConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
        register_parameters();
    }

    SaliencyModel(const SaliencyModel&) = delete;
    SaliencyModel& operator=(const SaliencyModel&) = delete;

    const NetConfig& config() const { return cfg_; }

    std::vector<Parameter<T>*>& parameters() { return registry_; }

    Parameter<T>* find_parameter(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    void zero_gradients() {
        for (Parameter<T>* p : registry_) p->zero_grad();
    }

    /// Uniform fan-based weight initialization (±sqrt(6/(fan_in+fan_out)));
    /// biases and attention gains start at 0. Reproducible by seed.
    void init_parameters(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (Parameter<T>* p : registry_) {
            if (p->value.rank() == 4) {
                const double fan_sum =
                    static_cast<double>(p->value.extent(0) + p->value.extent(1)) * p->value.extent(2) *
                    p->value.extent(3);
                const double bound = std::sqrt(6.0 / fan_sum);
                fill_uniform(p->value, rng, -bound, bound);
            } else {
                p->value.fill(T(0));
            }
            p->grad.fill(T(0));
            p->adam_m.fill(T(0));
            p->adam_v.fill(T(0));
        }
    }

    void init_parameters() { init_parameters(cfg_.seed); }

    SideOutputs backbone_forward(Var<T> image) {
        check_image(image.value());
        SideOutputs sides{};
        Var<T> x = image;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            for (ConvUnit& layer : blocks_[b]) {
                x = relu(conv2d(x, layer.weight, &layer.bias, 1, 1));
                const std::string stage = layer.weight.name.substr(0, layer.weight.name.rfind('.'));
                ensure_finite(x, stage.c_str());
            }
            if (b == 1) sides.l2 = x;
            if (b == 2) sides.l3 = x;
            if (b == 3) sides.l4 = x;
            if (b == 4) sides.s5 = x;
            if (b + 1 < blocks_.size()) x = maxpool2x2(x);
        }
        return sides;
    }

    Var<T> arn_forward(const SideOutputs& sides, bool ablate_attention = false) {
        Var<T> cur = attend(sides.s5, attention_[0], ablate_attention);
        ensure_finite(cur, "arn.stage5");
        const std::array<Var<T>, 3> taps{sides.l4, sides.l3, sides.l2};
        for (int i = 0; i < 3; ++i) {
            const std::string stage = "arn.stage" + std::to_string(4 - i);
            Var<T> up = conv_transpose2d(cur, upsample_kernel_[static_cast<std::size_t>(i)]);
            Var<T> adapted = relu(conv2d(taps[static_cast<std::size_t>(i)],
                                         adapter_[static_cast<std::size_t>(i)].weight,
                                         &adapter_[static_cast<std::size_t>(i)].bias, 1, 1));
            Var<T> enhanced = rcl_[static_cast<std::size_t>(i)].forward(adapted);
            const Tensor<T>& uv = up.value();
            const Tensor<T>& ev = enhanced.value();
            if (uv.extent(1) != ev.extent(1) || uv.extent(2) != ev.extent(2)) {
                throw std::runtime_error(stage + ": upsampled map " + shape_str(uv.shape()) +
                                         " does not align with side branch " + shape_str(ev.shape()));
            }
            Var<T> fused = relu(conv2d(concat_channels(up, enhanced), fusion_[static_cast<std::size_t>(i)].weight,
                                       &fusion_[static_cast<std::size_t>(i)].bias, 1, 1));
            cur = attend(fused, attention_[static_cast<std::size_t>(i) + 1], ablate_attention);
            ensure_finite(cur, stage.c_str());
        }
        Var<T> prob = sigmoid(conv2d(cur, readout_.weight, &readout_.bias, 1, 0));
        Var<T> out = upsample_bilinear_x2(prob);
        ensure_finite(out, "arn.readout");
        return out;
    }

    Var<T> forward(Tape<T>& tape, const Tensor<T>& image, bool ablate_attention = false) {
        check_image(image);
        if (!image.all_finite()) throw std::invalid_argument("model: non-finite values in input image");
        Var<T> in = tape.input(image);
        return arn_forward(backbone_forward(in), ablate_attention);
    }

    // Side-output channel counts, finest to coarsest tap: (l2, l3, l4, s5).
    std::array<int, 4> side_channels() const {
        return {cfg_.scaled(128), cfg_.scaled(256), cfg_.scaled(512), cfg_.scaled(512)};
    }

private:
    struct ConvUnit {
        Parameter<T> weight;
        Parameter<T> bias;
    };

    void check_image(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.extent(0) != 3 || image.extent(1) != cfg_.input_size ||
            image.extent(2) != cfg_.input_size) {
            throw std::invalid_argument("model: expected image of shape 3x" + std::to_string(cfg_.input_size) +
                                        "x" + std::to_string(cfg_.input_size) + ", got " +
                                        shape_str(image.shape()));
        }
    }

    static void ensure_finite(Var<T> v, const char* stage) {
        if (!v.value().all_finite()) {
            throw std::runtime_error(std::string("non-finite activations at ") + stage);
        }
    }

    Var<T> attend(Var<T> x, SelfAttention<T>& module, bool ablate) {
        return ablate ? x : module.forward_with_pooling(x);
    }

    static ConvUnit make_conv(const std::string& name, int out_ch, int in_ch, int k) {
        ConvUnit u;
        u.weight = Parameter<T>(name + ".weight", Tensor<T>(Shape{out_ch, in_ch, k, k}));
        u.bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{out_ch}));
        return u;
    }

    void build() {
        static constexpr int kBaseWidths[5] = {64, 128, 256, 512, 512};
        static constexpr int kBlockDepths[5] = {2, 2, 3, 3, 3};
        int in_ch = 3;
        blocks_.resize(5);
        for (int b = 0; b < 5; ++b) {
            const int out_ch = cfg_.scaled(kBaseWidths[b]);
            for (int l = 0; l < kBlockDepths[b]; ++l) {
                const std::string name =
                    "backbone.conv" + std::to_string(b + 1) + "_" + std::to_string(l + 1);
                blocks_[static_cast<std::size_t>(b)].push_back(make_conv(name, out_ch, in_ch, 3));
                in_ch = out_ch;
            }
        }

        const auto sides = side_channels();
        const int dec = cfg_.decoder_channels;
        const int rclc = cfg_.rcl_channels;
        // Decoder stages run coarse to fine: index 0 consumes l4, 1 -> l3, 2 -> l2.
        const std::array<int, 3> tap_channels{sides[2], sides[1], sides[0]};
        attention_[0] = SelfAttention<T>::make("arn.att5", sides[3], cfg_.attention_reduction,
                                               cfg_.attention_position_cap);
        for (int i = 0; i < 3; ++i) {
            const std::string sn = std::to_string(4 - i);
            const int up_in = (i == 0) ? sides[3] : dec;
            upsample_kernel_[static_cast<std::size_t>(i)] =
                Parameter<T>("arn.up" + sn + ".weight", Tensor<T>(Shape{up_in, dec, 4, 4}));
            adapter_[static_cast<std::size_t>(i)] =
                make_conv("arn.adapter" + sn, rclc, tap_channels[static_cast<std::size_t>(i)], 3);
            rcl_[static_cast<std::size_t>(i)] = RclUnit<T>::make("arn.rcl" + sn, rclc, rclc, cfg_.rcl_time_steps);
            fusion_[static_cast<std::size_t>(i)] = make_conv("arn.fuse" + sn, dec, dec + rclc, 3);
            attention_[static_cast<std::size_t>(i) + 1] =
                SelfAttention<T>::make("arn.att" + sn, dec, cfg_.attention_reduction, cfg_.attention_position_cap);
        }
        readout_.weight = Parameter<T>("arn.readout.weight", Tensor<T>(Shape{1, dec, 1, 1}));
        readout_.bias = Parameter<T>("arn.readout.bias", Tensor<T>(Shape{1}));
    }

    void register_parameters() {
        auto reg = [this](Parameter<T>& p) { registry_.push_back(&p); };
        for (auto& block : blocks_) {
            for (ConvUnit& u : block) {
                reg(u.weight);
                reg(u.bias);
            }
        }
        attention_[0].for_each_parameter(reg);
        for (int i = 0; i < 3; ++i) {
            reg(upsample_kernel_[static_cast<std::size_t>(i)]);
            reg(adapter_[static_cast<std::size_t>(i)].weight);
            reg(adapter_[static_cast<std::size_t>(i)].bias);
            rcl_[static_cast<std::size_t>(i)].for_each_parameter(reg);
            reg(fusion_[static_cast<std::size_t>(i)].weight);
            reg(fusion_[static_cast<std::size_t>(i)].bias);
            attention_[static_cast<std::size_t>(i) + 1].for_each_parameter(reg);
        }
        reg(readout_.weight);
        reg(readout_.bias);

        std::unordered_set<std::string> seen;
        for (Parameter<T>* p : registry_) {
            if (!seen.insert(p->name).second) {
                throw std::logic_error("duplicate parameter name: " + p->name);
            }
            by_name_.emplace(p->name, p);
        }
    }

    NetConfig cfg_;
    std::vector<std::vector<ConvUnit>> blocks_;
    std::array<SelfAttention<T>, 4> attention_;  // stage 5, 4, 3, 2
    std::array<Parameter<T>, 3> upsample_kernel_;
    std::array<ConvUnit, 3> adapter_;
    std::array<RclUnit<T>, 3> rcl_;
    std::array<ConvUnit, 3> fusion_;
    ConvUnit readout_;
    std::vector<Parameter<T>*> registry_;
    std::unordered_map<std::string, Parameter<T>*> by_name_;
};

}  // namespace arns

#endif  // ARNS_NETWORK_HPP
