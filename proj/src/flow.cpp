#include "caflow/flow.hpp"

#include <cmath>

namespace caflow {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

void validate_flow_config(const FlowConfig& c) {
    if (c.n_scales < 1) throw TensorError("flow config: n_scales must be >= 1");
    if (!is_pow2(c.image_size) || c.image_size < (1 << c.n_scales))
        throw TensorError("flow config: image_size must be a power of two >= 2^n_scales");
    if (c.channels < 1) throw TensorError("flow config: channels must be >= 1");
    if (c.k_steps < 0) throw TensorError("flow config: k_steps must be >= 0");
}

}  // namespace

std::vector<Shape> pyramid_shapes(int channels, int image_size, int n_scales, int batch) {
    std::vector<Shape> shapes{std::size_t(n_scales), Shape()};
    int c = channels, side = image_size;
    for (int s = 1; s <= n_scales; ++s) {
        c *= 4;
        side /= 2;
        if (s < n_scales) {
            shapes[std::size_t(n_scales - s)] = Shape(batch, c / 2, side, side);
            c /= 2;
        } else {
            shapes[0] = Shape(batch, c, side, side);
        }
    }
    return shapes;
}

MultiScaleFlow::MultiScaleFlow(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
    validate_flow_config(cfg);
    int c = cfg.channels;
    for (int s = 1; s <= cfg.n_scales; ++s) {
        c *= 4;
        std::vector<FlowStep> steps;
        steps.reserve(2 + std::size_t(cfg.k_steps));
        for (int t = 0; t < 2; ++t)
            steps.emplace_back(FlowStep::Kind::Transition, c, 0, cfg.hidden, rng, cfg.perm);
        for (int k = 0; k < cfg.k_steps; ++k)
            steps.emplace_back(FlowStep::Kind::Uncond, c, 0, cfg.hidden, rng, cfg.perm);
        scales_.push_back(std::move(steps));
        if (s < cfg.n_scales) c /= 2;
    }
}

EncodeResult MultiScaleFlow::encode(const Tensor& image) {
    const Shape s = image.shape();
    if (s.c != cfg_.channels || s.h != cfg_.image_size || s.w != cfg_.image_size)
        throw TensorError("encode: image shape " + s.str() + " does not match flow config");
    LatentPyramid pyr;
    pyr.levels.resize(std::size_t(cfg_.n_scales));
    Tensor cur = image;
    Tensor log_det(Shape(s.b, 1, 1, 1), 0.0f);
    for (int sc = 1; sc <= cfg_.n_scales; ++sc) {
        cur = squeeze2x(cur);
        for (auto& step : scales_[std::size_t(sc - 1)]) {
            LayerOutput o = step.forward(cur);
            cur = o.y;
            log_det = add(log_det, o.log_det);
        }
        if (sc < cfg_.n_scales) {
            auto [emit, cont] = channel_split(cur, cur.shape().c / 2);
            pyr.levels[std::size_t(cfg_.n_scales - sc)] = emit;
            cur = cont;
        } else {
            pyr.levels[0] = cur;
        }
    }
    return {std::move(pyr), log_det};
}

Tensor MultiScaleFlow::decode(const LatentPyramid& pyr) const {
    if (int(pyr.levels.size()) != cfg_.n_scales)
        throw TensorError("decode: pyramid has wrong number of levels");
    const auto expect = latent_shapes(pyr.levels[0].shape().b);
    for (int j = 0; j < cfg_.n_scales; ++j)
        if (pyr.levels[std::size_t(j)].shape() != expect[std::size_t(j)])
            throw TensorError("decode: level " + std::to_string(j) + " shape " +
                              pyr.levels[std::size_t(j)].shape().str() + ", expected " +
                              expect[std::size_t(j)].str());
    NoGradGuard ng;
    Tensor cur = pyr.levels[0];
    for (int sc = cfg_.n_scales; sc >= 1; --sc) {
        if (sc < cfg_.n_scales) cur = channel_concat(pyr.levels[std::size_t(cfg_.n_scales - sc)], cur);
        const auto& steps = scales_[std::size_t(sc - 1)];
        for (auto it = steps.rbegin(); it != steps.rend(); ++it) cur = it->inverse(cur);
        cur = unsqueeze2x(cur);
    }
    return cur;
}

Tensor MultiScaleFlow::log_prob(const Tensor& image) {
    EncodeResult enc = encode(image);
    Tensor lp = enc.log_det;
    for (const auto& level : enc.pyramid.levels) lp = add(lp, gaussian_log_prob(level));
    return lp;
}

Tensor MultiScaleFlow::sample(Rng& rng, float temperature, int batch) {
    LatentPyramid pyr;
    for (const Shape& s : latent_shapes(batch))
        pyr.levels.push_back(rng.normal_tensor(s, temperature));
    return decode(pyr);
}

std::vector<Shape> MultiScaleFlow::latent_shapes(int batch) const {
    return pyramid_shapes(cfg_.channels, cfg_.image_size, cfg_.n_scales, batch);
}

void MultiScaleFlow::collect_params(const std::string& prefix, ParamList& out) {
    for (std::size_t sc = 0; sc < scales_.size(); ++sc)
        for (std::size_t st = 0; st < scales_[sc].size(); ++st)
            scales_[sc][st].collect_params(
                prefix + ".scale" + std::to_string(sc + 1) + ".step" + std::to_string(st), out);
}

void MultiScaleFlow::set_actnorm_initialized(bool v) {
    for (auto& sc : scales_)
        for (auto& st : sc) st.set_actnorm_initialized(v);
}

double bits_per_dim(double log_prob_nats, std::int64_t dims) {
    const double d = double(dims);
    return -(log_prob_nats - d * std::log(256.0)) / (d * std::log(2.0));
}

std::pair<Tensor, double> uniform_dequantize(const Tensor& x_int, Rng& rng,
                                             const Tensor* forced_u) {
    for (float v : x_int.data())
        if (v < 0.0f || v > 255.0f || v != std::floor(v))
            throw TensorError("uniform_dequantize: pixels must be integers in 0..255");
    Tensor u = forced_u ? *forced_u : rng.uniform_tensor(x_int.shape());
    std::vector<float> out(x_int.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (x_int.data()[i] + u.data()[i]) / 256.0f;
    const Shape s = x_int.shape();
    const double per_sample = double(s.c) * s.h * s.w * std::log(256.0);
    return {Tensor::from_data(s, std::move(out)), per_sample};
}

VariationalDequantizer::VariationalDequantizer(int channels, int steps, int hidden, Rng& rng)
    : channels_(channels) {
    if (channels < 2)
        throw TensorError("variational dequantization needs >= 2 channels");
    for (int k = 0; k < steps; ++k)
        steps_.emplace_back(FlowStep::Kind::Cond, channels, channels, hidden, rng);
}

VariationalDequantizer::Result VariationalDequantizer::dequantize(const Tensor& x_int, Rng& rng) {
    for (float v : x_int.data())
        if (v < 0.0f || v > 255.0f || v != std::floor(v))
            throw TensorError("variational_dequantize: pixels must be integers in 0..255");
    const Shape s = x_int.shape();
    Tensor cond = mul(x_int.detach(), 1.0f / 256.0f);
    Tensor eps = rng.normal_tensor(s, 1.0f);
    Tensor v = eps;
    Tensor log_det(Shape(s.b, 1, 1, 1), 0.0f);
    for (auto& step : steps_) {
        LayerOutput o = step.forward(v, &cond);
        v = o.y;
        log_det = add(log_det, o.log_det);
    }
    Tensor u = sigmoid(v);
    for (float uv : u.data())
        if (!(uv > 0.0f && uv < 1.0f))
            throw TensorError("variational_dequantize: u left the open interval (0,1)");
    // log sigma'(v) = log u + log(1-u)
    Tensor sig_ld = sum_per_batch(add(log(u), log(sub(Tensor(s, 1.0f), u))));
    Tensor log_q = sub(sub(gaussian_log_prob(eps), log_det), sig_ld);
    // x_deq stays differentiable so the variational bound trains the
    // dequantization flow pathwise as well as through log_q.
    Tensor x_deq = add(mul(u, 1.0f / 256.0f), mul(x_int.detach(), 1.0f / 256.0f));
    return {x_deq, log_q};
}

void VariationalDequantizer::collect_params(const std::string& prefix, ParamList& out) {
    for (std::size_t k = 0; k < steps_.size(); ++k)
        steps_[k].collect_params(prefix + ".step" + std::to_string(k), out);
}

void VariationalDequantizer::set_actnorm_initialized(bool v) {
    for (auto& s : steps_) s.set_actnorm_initialized(v);
}

void perturb_params(const ParamList& params, Rng& rng, float stddev) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        for (auto& v : t.mutable_data()) v += float(rng.normal() * stddev);
    }
}

}  // namespace caflow
