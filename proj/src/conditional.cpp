#include "caflow/conditional.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace caflow {

CondSubFlow::CondSubFlow(int in_channels, int cond_channels, bool has_squeeze, bool has_split,
                         int m_steps, int hidden, Rng& rng)
    : in_channels_(in_channels),
      cond_channels_(cond_channels),
      has_squeeze_(has_squeeze),
      has_split_(has_split) {
    const int c = has_squeeze ? 4 * in_channels : in_channels;
    const int cc = has_squeeze ? 4 * cond_channels : cond_channels;
    for (int t = 0; t < 2; ++t)
        steps_.emplace_back(FlowStep::Kind::Transition, c, 0, hidden, rng);
    for (int k = 0; k < m_steps; ++k)
        steps_.emplace_back(FlowStep::Kind::Cond, c, cc, hidden, rng);
}

CondSubFlow::Result CondSubFlow::forward(const Tensor& x, const Tensor& cond) {
    if (x.shape().c != in_channels_)
        throw TensorError("cond sub-flow: input has " + std::to_string(x.shape().c) +
                          " channels, expected " + std::to_string(in_channels_));
    if (cond.shape().c != cond_channels_ || cond.shape().h != x.shape().h ||
        cond.shape().w != x.shape().w)
        throw TensorError("cond sub-flow: conditioning shape " + cond.shape().str() +
                          " incompatible with input " + x.shape().str());
    Tensor cur = x;
    Tensor cnd = cond;
    if (has_squeeze_) {
        cur = squeeze2x(cur);
        cnd = squeeze2x(cnd);
    }
    Tensor log_det(Shape(x.shape().b, 1, 1, 1), 0.0f);
    for (auto& step : steps_) {
        LayerOutput o = step.forward(cur, step.kind() == FlowStep::Kind::Cond ? &cnd : nullptr);
        cur = o.y;
        log_det = add(log_det, o.log_det);
    }
    Result r;
    r.log_det = log_det;
    if (has_split_) {
        auto [emit, cont] = channel_split(cur, cur.shape().c / 2);
        r.emitted = emit;
        r.cont = cont;
    } else {
        r.emitted = cur;
        r.cont = Tensor();
    }
    return r;
}

Tensor CondSubFlow::inverse(const Tensor& emitted, const Tensor& cont, const Tensor& cond) const {
    NoGradGuard ng;
    Tensor cnd = has_squeeze_ ? squeeze2x(cond) : cond;
    Tensor cur = has_split_ ? channel_concat(emitted, cont) : emitted;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it)
        cur = it->inverse(cur, it->kind() == FlowStep::Kind::Cond ? &cnd : nullptr);
    if (has_squeeze_) cur = unsqueeze2x(cur);
    return cur;
}

Shape CondSubFlow::emitted_shape(int batch, int in_side) const {
    const int c = has_squeeze_ ? 4 * in_channels_ : in_channels_;
    const int side = has_squeeze_ ? in_side / 2 : in_side;
    return Shape(batch, has_split_ ? c / 2 : c, side, side);
}

Shape CondSubFlow::cont_shape(int batch, int in_side) const {
    if (!has_split_) return Shape(batch, 0, 0, 0);
    const int c = has_squeeze_ ? 4 * in_channels_ : in_channels_;
    const int side = has_squeeze_ ? in_side / 2 : in_side;
    return Shape(batch, c - c / 2, side, side);
}

void CondSubFlow::collect_params(const std::string& prefix, ParamList& out) {
    for (std::size_t k = 0; k < steps_.size(); ++k)
        steps_[k].collect_params(prefix + ".step" + std::to_string(k), out);
}

void CondSubFlow::set_actnorm_initialized(bool v) {
    for (auto& s : steps_) s.set_actnorm_initialized(v);
}

// ---------------------------------------------------------------------------
// ConditionalArFlow

ConditionalArFlow::ConditionalArFlow(int level, std::vector<std::shared_ptr<CondSubFlow>> subflows,
                                     std::vector<Shape> z_shapes_unit)
    : level_(level), sub_(std::move(subflows)), z_shapes_unit_(std::move(z_shapes_unit)) {}

ConditionalArFlow::Enc ConditionalArFlow::encode(const Tensor& l_i,
                                                 const std::vector<Tensor>& conds) {
    if (int(conds.size()) != level_ + 1)
        throw TensorError("ar_encode: expected " + std::to_string(level_ + 1) +
                          " conditioning tensors");
    Enc enc;
    enc.z.resize(std::size_t(level_ + 1));
    enc.log_det = Tensor(Shape(l_i.shape().b, 1, 1, 1), 0.0f);
    Tensor cur = l_i;
    for (int j = level_; j >= 0; --j) {
        CondSubFlow::Result r = sub_[std::size_t(j)]->forward(cur, conds[std::size_t(j)]);
        enc.z[std::size_t(j)] = r.emitted;
        enc.log_det = add(enc.log_det, r.log_det);
        if (j > 0) cur = r.cont;
    }
    return enc;
}

Tensor ConditionalArFlow::decode(const std::vector<Tensor>& z,
                                 const std::vector<Tensor>& conds) const {
    if (int(z.size()) != level_ + 1 || int(conds.size()) != level_ + 1)
        throw TensorError("ar_decode: z/conditioning arity mismatch");
    Tensor cur = sub_[0]->inverse(z[0], Tensor(), conds[0]);
    for (int j = 1; j <= level_; ++j)
        cur = sub_[std::size_t(j)]->inverse(z[std::size_t(j)], cur, conds[std::size_t(j)]);
    return cur;
}

std::vector<Shape> ConditionalArFlow::z_shapes(int batch) const {
    std::vector<Shape> out = z_shapes_unit_;
    for (auto& s : out) s.b = batch;
    return out;
}

// ---------------------------------------------------------------------------
// CaflowModel

void validate_model_config(const ModelConfig& cfg) {
    if (cfg.n_scales < 1) throw TensorError("model config: n_scales must be >= 1");
    if (cfg.image_size < (1 << cfg.n_scales) ||
        (cfg.image_size & (cfg.image_size - 1)) != 0)
        throw TensorError("model config: image_size must be a power of two >= 2^n_scales");
    if (cfg.channels < 1) throw TensorError("model config: channels must be >= 1");
    if (cfg.m_cond_steps < 1) throw TensorError("model config: m_cond_steps must be >= 1");
    if (cfg.dequant == DequantMode::Variational && cfg.channels < 2)
        throw TensorError("model config: variational dequantization needs >= 2 channels");
}

CaflowModel::CaflowModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate_model_config(cfg);
    Rng rng(seed);
    FlowConfig fr{cfg.n_scales, cfg.k_steps_r, cfg.channels, cfg.image_size, cfg.hidden_uncond};
    FlowConfig ft{cfg.n_scales, cfg.k_steps_t, cfg.channels, cfg.image_size, cfg.hidden_uncond};
    r_ = std::make_unique<MultiScaleFlow>(fr, rng);
    t_ = std::make_unique<MultiScaleFlow>(ft, rng);

    const int n = cfg.n_scales;
    const auto ps = pyramid_shapes(cfg.channels, cfg.image_size, n, 1);
    auto inner_in_channels = [&](int k) {
        return k >= 1 ? ps[std::size_t(k)].c : (n >= 2 ? 2 * ps[1].c : ps[0].c);
    };

    // f_i^i groups, then the inner groups (shared across i under Appendix-D
    // sharing, one instance per (i,j) otherwise).
    std::vector<std::shared_ptr<CondSubFlow>> diag{std::size_t(n)};
    for (int i = 0; i < n; ++i) {
        diag[std::size_t(i)] = std::make_shared<CondSubFlow>(
            ps[std::size_t(i)].c, ps[std::size_t(i)].c, i >= 1, i >= 1, cfg.m_cond_steps,
            cfg.hidden_cond, rng);
        distinct_subflows_.push_back(diag[std::size_t(i)]);
    }
    std::vector<std::vector<std::shared_ptr<CondSubFlow>>> inner{std::size_t(n)};
    if (cfg.sharing == WeightSharing::AppendixD) {
        for (int k = 0; k <= n - 2; ++k) {
            auto f = std::make_shared<CondSubFlow>(inner_in_channels(k),
                                                   2 * ps[std::size_t(k)].c, k >= 1, k >= 1,
                                                   cfg.m_cond_steps, cfg.hidden_cond, rng);
            distinct_subflows_.push_back(f);
            for (int i = k + 1; i < n; ++i) inner[std::size_t(i)].push_back(f);
        }
    } else {
        for (int i = 1; i < n; ++i) {
            inner[std::size_t(i)].resize(std::size_t(i));
            for (int j = 0; j < i; ++j) {
                auto f = std::make_shared<CondSubFlow>(inner_in_channels(j),
                                                       2 * ps[std::size_t(j)].c, j >= 1, j >= 1,
                                                       cfg.m_cond_steps, cfg.hidden_cond, rng);
                inner[std::size_t(i)][std::size_t(j)] = f;
                distinct_subflows_.push_back(f);
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        std::vector<std::shared_ptr<CondSubFlow>> subs;
        for (int j = 0; j < i; ++j) subs.push_back(inner[std::size_t(i)][std::size_t(j)]);
        subs.push_back(diag[std::size_t(i)]);
        std::vector<Shape> zshapes;
        for (int j = 0; j <= i; ++j) {
            const int in_side = j == i ? ps[std::size_t(i)].h : ps[std::size_t(j)].h;
            zshapes.push_back(subs[std::size_t(j)]->emitted_shape(1, in_side));
        }
        flows_.emplace_back(i, std::move(subs), std::move(zshapes));
    }
    if (cfg.dequant == DequantMode::Variational)
        deq_ = std::make_unique<VariationalDequantizer>(cfg.channels, cfg.deq_steps,
                                                        cfg.hidden_cond, rng);
}

std::vector<Tensor> CaflowModel::build_conds(int i, const std::vector<Tensor>& d,
                                             const std::vector<Tensor>& l) const {
    std::vector<Tensor> conds(std::size_t(i + 1));
    conds[std::size_t(i)] = d[std::size_t(i)];
    for (int j = 0; j < i; ++j) {
        if (cfg_.mode == DependencyMode::Caflow) {
            conds[std::size_t(j)] = channel_concat(d[std::size_t(j)], l[std::size_t(j)]);
        } else {
            const Shape s = d[std::size_t(j)].shape();
            conds[std::size_t(j)] = Tensor(Shape(s.b, 2 * s.c, s.h, s.w), 0.0f);
        }
    }
    return conds;
}

CaflowModel::Parts CaflowModel::conditional_log_prob_parts(const Tensor& w, const Tensor& y) {
    std::vector<Tensor> d;
    {
        NoGradGuard ng;
        d = r_->encode(y).pyramid.levels;
    }
    EncodeResult enc_t = t_->encode(w);
    const std::vector<Tensor>& l = enc_t.pyramid.levels;
    Parts parts;
    parts.log_det_t = enc_t.log_det;
    for (int i = 0; i < cfg_.n_scales; ++i) {
        auto conds = build_conds(i, d, l);
        ConditionalArFlow::Enc enc = flows_[std::size_t(i)].encode(l[std::size_t(i)], conds);
        Tensor comp = enc.log_det;
        for (const Tensor& z : enc.z) comp = add(comp, gaussian_log_prob(z));
        parts.components.push_back(comp);
    }
    return parts;
}

Tensor CaflowModel::conditional_log_prob(const Tensor& w, const Tensor& y) {
    Parts parts = conditional_log_prob_parts(w, y);
    Tensor total = parts.log_det_t;
    for (const Tensor& c : parts.components) total = add(total, c);
    return total;
}

Tensor CaflowModel::conditional_sample(const Tensor& y, Rng& rng, float temperature) {
    NoGradGuard ng;
    std::vector<Tensor> d = r_->encode(y).pyramid.levels;
    const int batch = y.shape().b;
    std::vector<Tensor> l(std::size_t(cfg_.n_scales));
    for (int i = 0; i < cfg_.n_scales; ++i) {
        std::vector<Tensor> z;
        for (const Shape& s : flows_[std::size_t(i)].z_shapes(batch))
            z.push_back(rng.normal_tensor(s, temperature));
        auto conds = build_conds(i, d, l);
        l[std::size_t(i)] = flows_[std::size_t(i)].decode(z, conds);
    }
    LatentPyramid pyr;
    pyr.levels = std::move(l);
    return t_->decode(pyr);
}

std::vector<int> CaflowModel::rank_samples(const Tensor& y, const std::vector<Tensor>& samples) {
    if (samples.empty()) throw TensorError("rank_samples: empty sample list");
    NoGradGuard ng;
    std::vector<double> lp(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor t = conditional_log_prob(samples[i], y);
        double acc = 0.0;
        for (float v : t.data()) acc += v;
        lp[i] = acc;
    }
    std::vector<int> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return lp[a] > lp[b]; });
    return idx;
}

ParamList CaflowModel::params() {
    ParamList out;
    r_->collect_params("R", out);
    t_->collect_params("T", out);
    for (std::size_t g = 0; g < distinct_subflows_.size(); ++g)
        distinct_subflows_[g]->collect_params("F.group" + std::to_string(g), out);
    if (deq_) deq_->collect_params("deq", out);
    return out;
}

int CaflowModel::distinct_cond_group_count() const { return int(distinct_subflows_.size()); }

void CaflowModel::set_actnorm_initialized(bool v) {
    r_->set_actnorm_initialized(v);
    t_->set_actnorm_initialized(v);
    for (auto& f : distinct_subflows_) f->set_actnorm_initialized(v);
    if (deq_) deq_->set_actnorm_initialized(v);
}

}  // namespace caflow
