#ifndef ARNS_ATTENTION_HPP
#define ARNS_ATTENTION_HPP

#include <string>

#include "arns/ops.hpp"
#include "arns/tensor.hpp"

namespace arns {

/// Position-wise self-attention over a C×H×W feature map.
///
/// Key/query embeddings are 1×1 convolutions to C/reduction channels, the
/// value path is a 1×1 convolution C -> C. Scores between every pair of
/// positions are normalized column-wise, so each output position carries a
/// convex combination of value vectors. The result is blended back through a
/// learnable scalar gain that starts at 0, making the module an exact
/// identity at initialization.
template <typename T>
struct SelfAttention {
    Parameter<T> key_kernel;    // C1×C×1×1
    Parameter<T> query_kernel;  // C1×C×1×1
    Parameter<T> value_kernel;  // C×C×1×1
    Parameter<T> gain;          // scalar, initialized to 0
    int channels = 0;
    int reduced_channels = 0;
    int position_cap = 4096;

    static SelfAttention make(const std::string& prefix, int channels, int reduction = 8, int position_cap = 4096) {
        if (channels < 1) throw std::invalid_argument("attention: channels must be >= 1");
        if (reduction < 1) throw std::invalid_argument("attention: reduction must be >= 1");
        SelfAttention m;
        m.channels = channels;
        m.reduced_channels = std::max(1, channels / reduction);
        m.position_cap = position_cap;
        m.key_kernel = Parameter<T>(prefix + ".key", Tensor<T>(Shape{m.reduced_channels, channels, 1, 1}));
        m.query_kernel = Parameter<T>(prefix + ".query", Tensor<T>(Shape{m.reduced_channels, channels, 1, 1}));
        m.value_kernel = Parameter<T>(prefix + ".value", Tensor<T>(Shape{channels, channels, 1, 1}));
        m.gain = Parameter<T>(prefix + ".gain", Tensor<T>::scalar(T(0)));
        return m;
    }

    // Attention-weighted context at the resolution of x (no residual blend).
    Var<T> weighted_context(Var<T> x) {
        const Tensor<T>& xv = x.value();
        const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
        const int P = H * W;
        Var<T> keys = reshape(conv2d(x, key_kernel, nullptr, 1, 0), Shape{reduced_channels, P});
        Var<T> queries = reshape(conv2d(x, query_kernel, nullptr, 1, 0), Shape{reduced_channels, P});
        Var<T> values = reshape(conv2d(x, value_kernel, nullptr, 1, 0), Shape{C, P});
        Var<T> scores = matmul(transpose2d(keys), queries);  // P×P
        Var<T> weights = softmax_cols(scores);
        return reshape(matmul(values, weights), Shape{C, H, W});
    }

    /// y = gain * context + x. Rejects maps whose position count exceeds the
    /// configured cap (the score matrix is (H·W)² and would exhaust memory).
    Var<T> forward(Var<T> x) {
        const Tensor<T>& xv = x.value();
        detail::check_rank(xv, 3, "attention");
        check_channels(xv);
        const std::int64_t p = static_cast<std::int64_t>(xv.extent(1)) * xv.extent(2);
        if (p > position_cap) {
            throw std::invalid_argument("attention: " + std::to_string(p) + " positions exceed cap of " +
                                        std::to_string(position_cap) +
                                        "; pool the input or raise attention_position_cap");
        }
        return residual_scale_add(gain, weighted_context(x), x);
    }

    /// Same as forward(), but average-pools the context input until the
    /// position count fits under the cap and upsamples the context back
    /// before the residual blend. Used for large decoder stages.
    Var<T> forward_with_pooling(Var<T> x) {
        const Tensor<T>& xv = x.value();
        detail::check_rank(xv, 3, "attention");
        check_channels(xv);
        Var<T> ctx_in = x;
        int levels = 0;
        while (static_cast<std::int64_t>(ctx_in.value().extent(1)) * ctx_in.value().extent(2) > position_cap) {
            const int h = ctx_in.value().extent(1), w = ctx_in.value().extent(2);
            if (h % 2 != 0 || w % 2 != 0) {
                throw std::invalid_argument("attention: " + std::to_string(h) + "x" + std::to_string(w) +
                                            " exceeds the position cap and cannot be pooled further");
            }
            ctx_in = avgpool2x2(ctx_in);
            ++levels;
        }
        Var<T> context = weighted_context(ctx_in);
        for (int i = 0; i < levels; ++i) context = upsample_nearest_x2(context);
        return residual_scale_add(gain, context, x);
    }

    /// The (H·W)×(H·W) column-stochastic attention map, for inspection.
    Tensor<T> attention_map(const Tensor<T>& x) {
        detail::check_rank(x, 3, "attention_map");
        check_channels(x);
        const std::int64_t p = static_cast<std::int64_t>(x.extent(1)) * x.extent(2);
        if (p > position_cap) {
            throw std::invalid_argument("attention_map: " + std::to_string(p) + " positions exceed cap of " +
                                        std::to_string(position_cap));
        }
        Tape<T> tape;
        Var<T> xin = tape.input(x);
        Var<T> keys = reshape(conv2d(xin, key_kernel, nullptr, 1, 0), Shape{reduced_channels, static_cast<int>(p)});
        Var<T> queries =
            reshape(conv2d(xin, query_kernel, nullptr, 1, 0), Shape{reduced_channels, static_cast<int>(p)});
        Var<T> weights = softmax_cols(matmul(transpose2d(keys), queries));
        return weights.value();
    }

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(key_kernel);
        fn(query_kernel);
        fn(value_kernel);
        fn(gain);
    }

private:
    void check_channels(const Tensor<T>& x) const {
        if (x.extent(0) != channels) {
            throw std::invalid_argument("attention: input has " + std::to_string(x.extent(0)) +
                                        " channels, module expects " + std::to_string(channels));
        }
    }
};

}  // namespace arns

#endif  // ARNS_ATTENTION_HPP
