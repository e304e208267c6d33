#ifndef ARNS_RCL_HPP
#define ARNS_RCL_HPP

#include <string>

#include "arns/ops.hpp"
#include "arns/tensor.hpp"

namespace arns {

/// Recurrent convolutional layer. A feed-forward 3×3 convolution seeds the
/// state, then the same recurrent 3×3 kernel refines it for a fixed number of
/// time steps:
///
///   state(0) = lrn(relu(conv(u; feed) + bias))
///   state(t) = lrn(relu(conv(u; feed) + conv(state(t-1); recur) + bias))
///
/// The feed, recur and bias parameters are shared across all steps, so their
/// gradients accumulate over the whole unrolled chain.
template <typename T>
struct RclUnit {
    Parameter<T> feed_kernel;   // D×Din×3×3
    Parameter<T> recur_kernel;  // D×D×3×3
    Parameter<T> bias;          // D
    int time_steps = 3;
    LrnParams lrn_params;

    static RclUnit make(const std::string& prefix, int in_channels, int out_channels, int time_steps = 3) {
        if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("rcl: channel counts must be >= 1");
        if (time_steps < 0) throw std::invalid_argument("rcl: time_steps must be >= 0");
        RclUnit u;
        u.time_steps = time_steps;
        u.feed_kernel = Parameter<T>(prefix + ".feed", Tensor<T>(Shape{out_channels, in_channels, 3, 3}));
        u.recur_kernel = Parameter<T>(prefix + ".recur", Tensor<T>(Shape{out_channels, out_channels, 3, 3}));
        u.bias = Parameter<T>(prefix + ".bias", Tensor<T>(Shape{out_channels}));
        return u;
    }

    Var<T> forward(Var<T> u) {
        detail::check_rank(u.value(), 3, "rcl");
        if (u.value().extent(0) != feed_kernel.value.extent(1)) {
            throw std::invalid_argument("rcl: input has " + std::to_string(u.value().extent(0)) +
                                        " channels, feed kernel expects " +
                                        std::to_string(feed_kernel.value.extent(1)));
        }
        // The feed-forward term is identical at every step; record it once and
        // let gradient contributions from all steps accumulate on its node.
        Var<T> feed = conv2d(u, feed_kernel, &bias, 1, 1);
        Var<T> state = lrn(relu(feed), lrn_params.alpha, lrn_params.beta, lrn_params.window);
        for (int t = 1; t <= time_steps; ++t) {
            Var<T> z = add(feed, conv2d(state, recur_kernel, nullptr, 1, 1));
            state = lrn(relu(z), lrn_params.alpha, lrn_params.beta, lrn_params.window);
        }
        return state;
    }

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(feed_kernel);
        fn(recur_kernel);
        fn(bias);
    }
};

}  // namespace arns

#endif  // ARNS_RCL_HPP
