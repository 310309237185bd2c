#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace caflow {

// All tensors are dense 4-D (batch, channel, height, width), row-major f32.
struct Shape {
    int b = 0, c = 0, h = 0, w = 0;

    Shape() = default;
    Shape(int b_, int c_, int h_, int w_) : b(b_), c(c_), h(h_), w(w_) {}

    std::int64_t numel() const { return std::int64_t(b) * c * h * w; }
    bool operator==(const Shape& o) const { return b == o.b && c == o.c && h == o.h && w == o.w; }
    bool operator!=(const Shape& o) const { return !(*this == o); }
    std::string str() const;
};

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Propagates this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Toggles NaN/Inf checks at op boundaries (on by default; off for speed).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// While alive, ops are not recorded on the tape (inverse passes, sampling).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

class Tensor {
public:
    Tensor() : Tensor(Shape(0, 0, 0, 0)) {}
    explicit Tensor(Shape s, float fill = 0.0f, bool requires_grad = false);
    static Tensor from_data(Shape s, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v);

    const Shape& shape() const { return n_->shape; }
    std::int64_t numel() const { return n_->shape.numel(); }
    const std::vector<float>& data() const { return n_->data; }
    // In-place mutation; only meaningful for leaf/parameter tensors.
    std::vector<float>& mutable_data() { return n_->data; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    const std::vector<float>& grad() const;
    void zero_grad();
    // Runs reverse-mode accumulation from this (scalar) tensor.
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;

    float item() const;
    float at(int b, int c, int h, int w) const;

    std::shared_ptr<detail::Node> node() const { return n_; }
    bool same_storage(const Tensor& o) const { return n_ == o.n_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
    std::shared_ptr<detail::Node> n_;

    friend Tensor make_op(Shape, std::vector<float>, std::vector<Tensor>,
                          std::function<void(detail::Node&)>, const char*);
};

// Elementwise / broadcast ops. Second operand may share the first's shape,
// be a per-channel (1,C,1,1) tensor, or a scalar (1,1,1,1) tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float s);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, float s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);       // requires strictly positive input
Tensor log_abs(const Tensor& a);   // log|x|, requires nonzero input
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

// Same-padded convolution; kernels shaped (Cout,Cin,kh,kw) with kh,kw odd,
// bias shaped (1,Cout,1,1).
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias);

std::pair<Tensor, Tensor> channel_split(const Tensor& x, int at);
Tensor channel_concat(const Tensor& a, const Tensor& b);

// 2x2 spatial-to-channel rearrangement. Output channel c*4+k where k indexes
// the sub-pixel (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
Tensor squeeze2x(const Tensor& x);
Tensor unsqueeze2x(const Tensor& x);

Tensor sum_all(const Tensor& x);        // -> (1,1,1,1), f64 accumulation
Tensor mean_all(const Tensor& x);       // -> (1,1,1,1)
Tensor sum_per_batch(const Tensor& x);  // -> (B,1,1,1)
Tensor expand_batch(const Tensor& scalar, int b);

// Channel-mixing matmul: W shaped (1,1,Cout,Cin) applied per pixel.
Tensor conv1x1_mat(const Tensor& x, const Tensor& w);
// (1,1,N,M) x (1,1,M,P) -> (1,1,N,P)
Tensor matmul_sq(const Tensor& a, const Tensor& b);

// Counter-based RNG: splitmix64 state advance, uniform from the high 53 bits,
// normal via Box-Muller. Identical seed gives an identical stream everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    double uniform();  // [0,1)
    double normal();   // N(0,1)

    Tensor uniform_tensor(Shape s);
    Tensor normal_tensor(Shape s, float temperature = 1.0f);

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }
    // Independent stream for worker k, decorrelated from the root stream.
    Rng derive(std::uint64_t k) const;

private:
    std::uint64_t state_;
};

// Central differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps = 1e-3);

}  // namespace caflow
