#pragma once

#include <optional>
#include <string>
#include <vector>

#include "caflow/tensor.hpp"

namespace caflow {

// y plus the per-batch-element log|det J| of the transform, shaped (B,1,1,1).
struct LayerOutput {
    Tensor y;
    Tensor log_det;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

// Per-channel affine normalization. Optionally initializes scale/bias from the
// first forward batch so post-activation channels have mean 0, variance 1.
class ActNorm {
public:
    explicit ActNorm(int channels, bool data_init = false);

    LayerOutput forward(const Tensor& x);
    Tensor inverse(const Tensor& y) const;

    bool initialized() const { return initialized_; }
    void set_initialized(bool v) { initialized_ = v; }
    void collect_params(const std::string& prefix, ParamList& out);

    Tensor& scale() { return scale_; }
    Tensor& bias() { return bias_; }

private:
    Tensor scale_, bias_;  // (1,C,1,1)
    bool initialized_;
};

// Invertible 1x1 convolution in PLU form: W = P (I + tril(L)) (triu(U) + S exp(d))
// with fixed permutation P and fixed diagonal signs S. log-det is H*W*sum(d).
class InvConv1x1 {
public:
    enum class Perm { Identity, HalfRotate };

    InvConv1x1(int channels, Perm perm = Perm::HalfRotate);

    LayerOutput forward(const Tensor& x) const;
    Tensor inverse(const Tensor& y) const;

    Tensor weight() const;  // reconstructed W, autograd-tracked, (1,1,C,C)
    void collect_params(const std::string& prefix, ParamList& out);

    int channels() const { return channels_; }

private:
    int channels_;
    std::vector<int> perm_;       // row i of P picks input channel perm_[i]
    std::vector<float> sign_;     // fixed diagonal signs
    Tensor lower_;                // (1,1,C,C), strictly lower part used
    Tensor upper_;                // (1,1,C,C), strictly upper part used
    Tensor log_diag_;             // (1,1,C,C), diagonal holds log|diag(U)|
};

// Three-convolution net (3x3 -> 1x1 -> 3x3, ReLU between) producing scale and
// bias for affine transforms. Final conv is zero-initialized.
class CouplingNet {
public:
    CouplingNet(int in_channels, int transformed_channels, int hidden, Rng& rng);

    // Returns (raw_scale, bias), each with transformed_channels channels.
    std::pair<Tensor, Tensor> forward(const Tensor& x) const;

    void collect_params(const std::string& prefix, ParamList& out);
    int in_channels() const { return in_channels_; }

private:
    int in_channels_, t_channels_, hidden_;
    Tensor k1_, b1_, k2_, b2_, k3_, b3_;
};

// Bounds the raw coupling scale: s = tanh(raw) * kCouplingScaleMax.
constexpr float kCouplingScaleMax = 2.0f;
Tensor coupling_scale(const Tensor& raw);

class AffineCoupling {
public:
    AffineCoupling(int channels, int hidden, Rng& rng);

    LayerOutput forward(const Tensor& x) const;
    Tensor inverse(const Tensor& y) const;
    void collect_params(const std::string& prefix, ParamList& out);

private:
    int channels_;
    CouplingNet net_;
};

class CondAffineCoupling {
public:
    CondAffineCoupling(int channels, int cond_channels, int hidden, Rng& rng);

    LayerOutput forward(const Tensor& x, const Tensor& cond) const;
    Tensor inverse(const Tensor& y, const Tensor& cond) const;
    void collect_params(const std::string& prefix, ParamList& out);

private:
    int channels_, cond_channels_;
    CouplingNet net_;
};

// Affine transform of all channels driven solely by the conditioning tensor.
class AffineInjector {
public:
    AffineInjector(int channels, int cond_channels, int hidden, Rng& rng);

    LayerOutput forward(const Tensor& x, const Tensor& cond) const;
    Tensor inverse(const Tensor& y, const Tensor& cond) const;
    void collect_params(const std::string& prefix, ParamList& out);

private:
    int channels_, cond_channels_;
    CouplingNet net_;
};

LayerOutput squeeze_fwd(const Tensor& x);   // log_det exactly 0
Tensor squeeze_inv(const Tensor& y);

// One step of a flow. Transition: actnorm + 1x1 conv. Unconditional adds an
// affine coupling; conditional adds an affine injector and a conditional
// coupling instead.
class FlowStep {
public:
    enum class Kind { Transition, Uncond, Cond };

    FlowStep(Kind kind, int channels, int cond_channels, int hidden, Rng& rng,
             InvConv1x1::Perm perm = InvConv1x1::Perm::HalfRotate);

    LayerOutput forward(const Tensor& x, const Tensor* cond = nullptr);
    Tensor inverse(const Tensor& y, const Tensor* cond = nullptr) const;
    void collect_params(const std::string& prefix, ParamList& out);
    void set_actnorm_initialized(bool v) { actnorm_.set_initialized(v); }

    Kind kind() const { return kind_; }

private:
    Kind kind_;
    ActNorm actnorm_;
    InvConv1x1 conv_;
    std::optional<AffineCoupling> coupling_;
    std::optional<AffineInjector> injector_;
    std::optional<CondAffineCoupling> cond_coupling_;
};

// Gaussian prior helpers: per-batch log N(x; 0, I), shaped (B,1,1,1).
Tensor gaussian_log_prob(const Tensor& x);

}  // namespace caflow
