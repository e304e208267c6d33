#ifndef ARNS_TENSOR_HPP
#define ARNS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace arns {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

/// Dense row-major tensor of rank 1-4. Feature maps use C×H×W layout.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill_value = T(0)) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill_value);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Unchecked multi-axis access; rank must match the overload.
    T& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * extent(1) + j]; }
    T operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * extent(1) + j]; }
    T& operator()(int c, int h, int w) {
        return data_[(static_cast<std::size_t>(c) * extent(1) + h) * extent(2) + w];
    }
    T operator()(int c, int h, int w) const {
        return data_[(static_cast<std::size_t>(c) * extent(1) + h) * extent(2) + w];
    }
    T& operator()(int o, int c, int h, int w) {
        return data_[((static_cast<std::size_t>(o) * extent(1) + c) * extent(2) + h) * extent(3) + w];
    }
    T operator()(int o, int c, int h, int w) const {
        return data_[((static_cast<std::size_t>(o) * extent(1) + c) * extent(2) + h) * extent(3) + w];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 4) {
            throw std::invalid_argument("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
        }
        for (int e : shape_) {
            if (e < 1) throw std::invalid_argument("tensor extents must be >= 1, got shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

/// Named tensor with accumulated gradient and Adam moment state.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> adam_m;
    Tensor<T> adam_v;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string name_, Tensor<T> value_)
        : name(std::move(name_)),
          value(std::move(value_)),
          grad(value.shape()),
          adam_m(value.shape()),
          adam_v(value.shape()) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;
    const Tensor<T>& value() const;
};

/// Linear record of one forward pass. backward() replays the nodes in exact
/// reverse recording order and accumulates gradients into reachable
/// Parameters. Single use: one backward per tape.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, int)>;

    Var<T> input(Tensor<T> v, bool needs_grad = false) {
        Node n;
        n.op = "input";
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    Var<T> use(Parameter<T>& p) {
        Node n;
        n.op = "param";
        n.value = p.value;
        n.needs_grad = p.trainable;
        Parameter<T>* pp = &p;
        n.back = [pp](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            T* dst = pp->grad.data();
            const T* src = g.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
        };
        return push(std::move(n));
    }

    Var<T> record(const char* op, Tensor<T> value, std::vector<int> inputs, BackFn back) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.back = std::move(back);
        for (int i : n.inputs) {
            if (nodes_[static_cast<std::size_t>(i)].needs_grad) {
                n.needs_grad = true;
                break;
            }
        }
        return push(std::move(n));
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Valid once backward() has allocated gradient buffers.
    Tensor<T>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    void backward(Var<T> loss) {
        if (loss.tape != this) {
            throw std::runtime_error("backward: tensor was not produced by this tape");
        }
        if (consumed_) {
            throw std::runtime_error("backward: tape already consumed (one backward per forward pass)");
        }
        if (loss.id < 0 || loss.id >= static_cast<int>(nodes_.size())) {
            throw std::runtime_error("backward: invalid node id");
        }
        Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
        if (ln.value.numel() != 1) {
            throw std::runtime_error("backward: loss must be scalar, got shape " + shape_str(ln.value.shape()));
        }
        consumed_ = true;
        for (Node& n : nodes_) {
            if (n.needs_grad) n.grad = Tensor<T>(n.value.shape());
        }
        if (!ln.needs_grad) return;  // nothing trainable reachable
        ln.grad[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.back) n.back(*this, i);
        }
    }

    int size() const { return static_cast<int>(nodes_.size()); }

private:
    struct Node {
        const char* op = "";
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int> inputs;
        BackFn back;
        bool needs_grad = false;
    };

    Var<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    // deque: recording must not invalidate references handed out by value().
    std::deque<Node> nodes_;
    bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

/// Deterministic stream derivation (splitmix-style), used for per-step RNGs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor<T> random_uniform(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(shape);
    fill_uniform(t, rng, lo, hi);
    return t;
}

}  // namespace arns

#endif  // ARNS_TENSOR_HPP
