#include "caflow/layers.hpp"

#include <algorithm>
#include <cmath>

namespace caflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

Tensor constant_matrix(int c, const std::function<float(int, int)>& f) {
    std::vector<float> d(std::size_t(c) * c);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) d[std::size_t(i) * c + j] = f(i, j);
    return Tensor::from_data(Shape(1, 1, c, c), std::move(d));
}

}  // namespace

Tensor gaussian_log_prob(const Tensor& x) {
    const Shape s = x.shape();
    const double d = double(s.c) * s.h * s.w;
    Tensor sq = mul(x, x);
    return add(mul(sum_per_batch(sq), -0.5f), float(-0.5 * d * kLog2Pi));
}

// ---------------------------------------------------------------------------
// ActNorm

ActNorm::ActNorm(int channels, bool data_init)
    : scale_(Shape(1, channels, 1, 1), 1.0f, true),
      bias_(Shape(1, channels, 1, 1), 0.0f, true),
      initialized_(!data_init) {}

LayerOutput ActNorm::forward(const Tensor& x) {
    const Shape s = x.shape();
    if (!initialized_) {
        // Data-dependent init: per-channel mean 0, variance 1 after the layer.
        const std::size_t hw = std::size_t(s.h) * s.w;
        for (int c = 0; c < s.c; ++c) {
            double sum = 0.0, sum2 = 0.0;
            for (int b = 0; b < s.b; ++b) {
                const float* p = x.data().data() + (std::size_t(b) * s.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum += p[i];
                    sum2 += double(p[i]) * p[i];
                }
            }
            const double n = double(s.b) * hw;
            const double mean = sum / n;
            const double var = std::max(sum2 / n - mean * mean, 0.0);
            const double std = std::sqrt(var) + 1e-6;
            scale_.mutable_data()[c] = float(1.0 / std);
            bias_.mutable_data()[c] = float(-mean / std);
        }
        initialized_ = true;
    }
    for (float v : scale_.data())
        if (v == 0.0f) throw TensorError("actnorm: zero scale");
    Tensor y = add(mul(x, scale_), bias_);
    Tensor ld = mul(sum_all(log_abs(scale_)), float(s.h) * float(s.w));
    return {y, expand_batch(ld, s.b)};
}

Tensor ActNorm::inverse(const Tensor& y) const {
    const Shape s = y.shape();
    std::vector<float> out(y.data().size());
    const std::size_t hw = std::size_t(s.h) * s.w;
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c) {
            const float sc = scale_.data()[c], bi = bias_.data()[c];
            if (sc == 0.0f) throw TensorError("actnorm: zero scale");
            const float* src = y.data().data() + (std::size_t(b) * s.c + c) * hw;
            float* dst = out.data() + (std::size_t(b) * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - bi) / sc;
        }
    return Tensor::from_data(s, std::move(out));
}

void ActNorm::collect_params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".scale", scale_});
    out.push_back({prefix + ".bias", bias_});
}

// ---------------------------------------------------------------------------
// InvConv1x1

InvConv1x1::InvConv1x1(int channels, Perm perm)
    : channels_(channels),
      perm_(channels),
      sign_(channels, 1.0f),
      lower_(Shape(1, 1, channels, channels), 0.0f, true),
      upper_(Shape(1, 1, channels, channels), 0.0f, true),
      log_diag_(Shape(1, 1, channels, channels), 0.0f, true) {
    for (int i = 0; i < channels; ++i)
        perm_[i] = (perm == Perm::Identity || channels < 2) ? i : (i + channels / 2) % channels;
}

Tensor InvConv1x1::weight() const {
    const int c = channels_;
    Tensor mask_low = constant_matrix(c, [](int i, int j) { return i > j ? 1.0f : 0.0f; });
    Tensor mask_up = constant_matrix(c, [](int i, int j) { return i < j ? 1.0f : 0.0f; });
    Tensor eye = constant_matrix(c, [](int i, int j) { return i == j ? 1.0f : 0.0f; });
    Tensor sign_diag =
        constant_matrix(c, [this](int i, int j) { return i == j ? sign_[i] : 0.0f; });
    Tensor pmat =
        constant_matrix(c, [this](int i, int j) { return perm_[i] == j ? 1.0f : 0.0f; });
    Tensor lmat = add(mul(lower_, mask_low), eye);
    Tensor umat = add(mul(upper_, mask_up), mul(exp(log_diag_), sign_diag));
    return matmul_sq(pmat, matmul_sq(lmat, umat));
}

LayerOutput InvConv1x1::forward(const Tensor& x) const {
    const Shape s = x.shape();
    Tensor y = conv1x1_mat(x, weight());
    Tensor diag_mask = constant_matrix(channels_, [](int i, int j) { return i == j ? 1.0f : 0.0f; });
    Tensor ld = mul(sum_all(mul(log_diag_, diag_mask)), float(s.h) * float(s.w));
    return {y, expand_batch(ld, s.b)};
}

Tensor InvConv1x1::inverse(const Tensor& y) const {
    const Shape s = y.shape();
    const int c = channels_;
    const std::size_t hw = std::size_t(s.h) * s.w;
    const auto& lo = lower_.data();
    const auto& up = upper_.data();
    const auto& ld = log_diag_.data();
    std::vector<float> out(y.data().size());
    std::vector<double> t(c), z(c);
    for (int b = 0; b < s.b; ++b)
        for (std::size_t px = 0; px < hw; ++px) {
            // t = P^T y
            for (int i = 0; i < c; ++i)
                t[perm_[i]] = y.data()[(std::size_t(b) * c + i) * hw + px];
            // L z = t (unit lower triangular)
            for (int i = 0; i < c; ++i) {
                double acc = t[i];
                for (int j = 0; j < i; ++j) acc -= double(lo[std::size_t(i) * c + j]) * z[j];
                z[i] = acc;
            }
            // U x = z (diag = sign * exp(log_diag)), solution overwrites z
            for (int i = c - 1; i >= 0; --i) {
                double acc = z[i];
                for (int j = i + 1; j < c; ++j) acc -= double(up[std::size_t(i) * c + j]) * z[j];
                z[i] = acc / (double(sign_[i]) * std::exp(double(ld[std::size_t(i) * c + i])));
            }
            for (int i = 0; i < c; ++i) out[(std::size_t(b) * c + i) * hw + px] = float(z[i]);
        }
    return Tensor::from_data(s, std::move(out));
}

void InvConv1x1::collect_params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".lower", lower_});
    out.push_back({prefix + ".upper", upper_});
    out.push_back({prefix + ".log_diag", log_diag_});
}

// ---------------------------------------------------------------------------
// CouplingNet

CouplingNet::CouplingNet(int in_channels, int transformed_channels, int hidden, Rng& rng)
    : in_channels_(in_channels),
      t_channels_(transformed_channels),
      hidden_(hidden),
      k1_(Shape(hidden, in_channels, 3, 3), 0.0f, true),
      b1_(Shape(1, hidden, 1, 1), 0.0f, true),
      k2_(Shape(hidden, hidden, 1, 1), 0.0f, true),
      b2_(Shape(1, hidden, 1, 1), 0.0f, true),
      k3_(Shape(2 * transformed_channels, hidden, 3, 3), 0.0f, true),
      b3_(Shape(1, 2 * transformed_channels, 1, 1), 0.0f, true) {
    const double std1 = std::sqrt(2.0 / (9.0 * in_channels));
    for (auto& v : k1_.mutable_data()) v = float(rng.normal() * std1);
    const double std2 = std::sqrt(2.0 / hidden);
    for (auto& v : k2_.mutable_data()) v = float(rng.normal() * std2);
    // k3, b3 stay zero so the owning flow step starts as the identity.
}

std::pair<Tensor, Tensor> CouplingNet::forward(const Tensor& x) const {
    Tensor h1 = relu(conv2d(x, k1_, b1_));
    Tensor h2 = relu(conv2d(h1, k2_, b2_));
    Tensor o = conv2d(h2, k3_, b3_);
    auto [raw_s, bias] = channel_split(o, t_channels_);
    return {raw_s, bias};
}

void CouplingNet::collect_params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".k1", k1_});
    out.push_back({prefix + ".b1", b1_});
    out.push_back({prefix + ".k2", k2_});
    out.push_back({prefix + ".b2", b2_});
    out.push_back({prefix + ".k3", k3_});
    out.push_back({prefix + ".b3", b3_});
}

Tensor coupling_scale(const Tensor& raw) { return mul(tanh(raw), kCouplingScaleMax); }

// ---------------------------------------------------------------------------
// AffineCoupling

AffineCoupling::AffineCoupling(int channels, int hidden, Rng& rng)
    : channels_(channels), net_(channels / 2 + channels % 2, channels / 2, hidden, rng) {
    if (channels % 2 != 0) throw TensorError("affine coupling requires an even channel count");
}

LayerOutput AffineCoupling::forward(const Tensor& x) const {
    auto [z1, z2] = channel_split(x, channels_ / 2);
    auto [raw_s, b] = net_.forward(z2);
    Tensor s = coupling_scale(raw_s);
    Tensor y1 = add(mul(z1, exp(s)), b);
    return {channel_concat(y1, z2), sum_per_batch(s)};
}

Tensor AffineCoupling::inverse(const Tensor& y) const {
    NoGradGuard ng;
    auto [y1, z2] = channel_split(y, channels_ / 2);
    auto [raw_s, b] = net_.forward(z2);
    Tensor s = coupling_scale(raw_s);
    Tensor z1 = mul(sub(y1, b), exp(neg(s)));
    return channel_concat(z1, z2);
}

void AffineCoupling::collect_params(const std::string& prefix, ParamList& out) {
    net_.collect_params(prefix + ".net", out);
}

// ---------------------------------------------------------------------------
// CondAffineCoupling

CondAffineCoupling::CondAffineCoupling(int channels, int cond_channels, int hidden, Rng& rng)
    : channels_(channels),
      cond_channels_(cond_channels),
      net_(channels - channels / 2 + cond_channels, channels / 2, hidden, rng) {
    if (channels < 2) throw TensorError("conditional coupling requires at least 2 channels");
}

LayerOutput CondAffineCoupling::forward(const Tensor& x, const Tensor& cond) const {
    if (cond.shape().h != x.shape().h || cond.shape().w != x.shape().w)
        throw TensorError("conditional coupling: spatial mismatch between input " +
                          x.shape().str() + " and cond " + cond.shape().str());
    auto [z1, z2] = channel_split(x, channels_ / 2);
    auto [raw_s, b] = net_.forward(channel_concat(z2, cond));
    Tensor s = coupling_scale(raw_s);
    Tensor y1 = add(mul(z1, exp(s)), b);
    return {channel_concat(y1, z2), sum_per_batch(s)};
}

Tensor CondAffineCoupling::inverse(const Tensor& y, const Tensor& cond) const {
    NoGradGuard ng;
    auto [y1, z2] = channel_split(y, channels_ / 2);
    auto [raw_s, b] = net_.forward(channel_concat(z2, cond));
    Tensor s = coupling_scale(raw_s);
    Tensor z1 = mul(sub(y1, b), exp(neg(s)));
    return channel_concat(z1, z2);
}

void CondAffineCoupling::collect_params(const std::string& prefix, ParamList& out) {
    net_.collect_params(prefix + ".net", out);
}

// ---------------------------------------------------------------------------
// AffineInjector

AffineInjector::AffineInjector(int channels, int cond_channels, int hidden, Rng& rng)
    : channels_(channels), cond_channels_(cond_channels), net_(cond_channels, channels, hidden, rng) {}

LayerOutput AffineInjector::forward(const Tensor& x, const Tensor& cond) const {
    if (cond.shape().h != x.shape().h || cond.shape().w != x.shape().w)
        throw TensorError("affine injector: spatial mismatch between input " + x.shape().str() +
                          " and cond " + cond.shape().str());
    auto [raw_s, b] = net_.forward(cond);
    Tensor s = coupling_scale(raw_s);
    Tensor y = add(mul(x, exp(s)), b);
    return {y, sum_per_batch(s)};
}

Tensor AffineInjector::inverse(const Tensor& y, const Tensor& cond) const {
    NoGradGuard ng;
    auto [raw_s, b] = net_.forward(cond);
    Tensor s = coupling_scale(raw_s);
    return mul(sub(y, b), exp(neg(s)));
}

void AffineInjector::collect_params(const std::string& prefix, ParamList& out) {
    net_.collect_params(prefix + ".net", out);
}

// ---------------------------------------------------------------------------
// Squeeze

LayerOutput squeeze_fwd(const Tensor& x) {
    Tensor y = squeeze2x(x);
    return {y, Tensor(Shape(x.shape().b, 1, 1, 1), 0.0f)};
}

Tensor squeeze_inv(const Tensor& y) { return unsqueeze2x(y); }

// ---------------------------------------------------------------------------
// FlowStep

FlowStep::FlowStep(Kind kind, int channels, int cond_channels, int hidden, Rng& rng,
                   InvConv1x1::Perm perm)
    : kind_(kind), actnorm_(channels, false), conv_(channels, perm) {
    switch (kind) {
        case Kind::Transition:
            break;
        case Kind::Uncond:
            coupling_.emplace(channels, hidden, rng);
            break;
        case Kind::Cond:
            injector_.emplace(channels, cond_channels, hidden, rng);
            cond_coupling_.emplace(channels, cond_channels, hidden, rng);
            break;
    }
}

LayerOutput FlowStep::forward(const Tensor& x, const Tensor* cond) {
    LayerOutput a = actnorm_.forward(x);
    LayerOutput c = conv_.forward(a.y);
    Tensor ld = add(a.log_det, c.log_det);
    if (kind_ == Kind::Transition) return {c.y, ld};
    if (kind_ == Kind::Uncond) {
        LayerOutput k = coupling_->forward(c.y);
        return {k.y, add(ld, k.log_det)};
    }
    if (cond == nullptr) throw TensorError("conditional flow step requires a conditioning tensor");
    LayerOutput inj = injector_->forward(c.y, *cond);
    LayerOutput k = cond_coupling_->forward(inj.y, *cond);
    return {k.y, add(add(ld, inj.log_det), k.log_det)};
}

Tensor FlowStep::inverse(const Tensor& y, const Tensor* cond) const {
    Tensor cur = y;
    if (kind_ == Kind::Cond) {
        if (cond == nullptr)
            throw TensorError("conditional flow step requires a conditioning tensor");
        cur = cond_coupling_->inverse(cur, *cond);
        cur = injector_->inverse(cur, *cond);
    } else if (kind_ == Kind::Uncond) {
        cur = coupling_->inverse(cur);
    }
    cur = conv_.inverse(cur);
    return actnorm_.inverse(cur);
}

void FlowStep::collect_params(const std::string& prefix, ParamList& out) {
    actnorm_.collect_params(prefix + ".actnorm", out);
    conv_.collect_params(prefix + ".conv1x1", out);
    if (coupling_) coupling_->collect_params(prefix + ".coupling", out);
    if (injector_) injector_->collect_params(prefix + ".injector", out);
    if (cond_coupling_) cond_coupling_->collect_params(prefix + ".cond_coupling", out);
}

}  // namespace caflow
