#include "caflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <zlib.h>

namespace fs = std::filesystem;

namespace caflow {

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.lambda < 0.0f) throw TensorError("train config: lambda must be >= 0");
    if (cfg.ema_rate < 0.0f || cfg.ema_rate >= 1.0f)
        throw TensorError("train config: ema_rate must be in [0, 1)");
    if (cfg.grad_clip_norm <= 0.0f) throw TensorError("train config: grad_clip_norm must be > 0");
    if (cfg.batch_size < 1) throw TensorError("train config: batch_size must be >= 1");
    if (cfg.max_iters < 0) throw TensorError("train config: max_iters must be >= 0");
    if (cfg.warmup_iters < 0) throw TensorError("train config: warmup_iters must be >= 0");
    if (cfg.step_gamma <= 0.0f || cfg.step_gamma > 1.0f)
        throw TensorError("train config: step_gamma must be in (0, 1]");
    if (cfg.best_of_m < 1) throw TensorError("train config: best_of_m must be >= 1");
    if (cfg.val_interval < 1) throw TensorError("train config: val_interval must be >= 1");
    if (cfg.checkpoint_interval < 1)
        throw TensorError("train config: checkpoint_interval must be >= 1");
}

double lr_schedule(const TrainConfig& cfg, std::int64_t iter) {
    if (iter < 0) throw TensorError("lr_schedule: negative iteration");
    double lr;
    if (cfg.warmup_iters > 0 && iter < cfg.warmup_iters)
        lr = double(cfg.target_lr) * double(iter) / double(cfg.warmup_iters);
    else
        lr = double(cfg.target_lr) *
             std::pow(double(cfg.step_gamma), double(iter - cfg.warmup_iters));
    if (cfg.plateau_lr_drop) lr /= 10.0;
    return lr;
}

double clip_gradients(const ParamList& params, float max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        const auto& g = p.tensor.node()->grad;
        for (float v : g) {
            if (!std::isfinite(v)) throw NumericError("non-finite gradient in " + p.name);
            sq += double(v) * double(v);
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > double(max_norm) && norm > 0.0) {
        const float scale = float(double(max_norm) / norm);
        for (const auto& p : params)
            for (float& v : p.tensor.node()->grad) v *= scale;
    }
    return norm;
}

Adam::Adam(float beta1, float beta2, float eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const ParamList& params, double lr) {
    if (m_.size() != params.size()) {
        m_.assign(params.size(), {});
        v_.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].tensor.data().size(), 0.0f);
            v_[i].assign(params[i].tensor.data().size(), 0.0f);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
    const double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto& data = t.mutable_data();
        const auto& grad = t.node()->grad;
        if (grad.empty()) continue;  // parameter unused by this loss
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = grad[k];
            m[k] = float(beta1_ * m[k] + (1.0f - beta1_) * g);
            v[k] = float(beta2_ * v[k] + (1.0f - beta2_) * g * g);
            const double mhat = m[k] / bc1, vhat = v[k] / bc2;
            data[k] -= float(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

void EmaShadow::init(const ParamList& params) {
    shadow_.clear();
    shadow_.reserve(params.size());
    for (const auto& p : params) shadow_.push_back(p.tensor.data());
}

void EmaShadow::update(const ParamList& params, float rate) {
    if (shadow_.size() != params.size()) throw TensorError("ema: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& d = params[i].tensor.data();
        if (shadow_[i].size() != d.size())
            throw TensorError("ema: shape mismatch in " + params[i].name);
        for (std::size_t k = 0; k < d.size(); ++k)
            shadow_[i][k] = rate * shadow_[i][k] + (1.0f - rate) * d[k];
    }
}

void EmaShadow::swap_into(const ParamList& params) {
    if (shadow_.size() != params.size()) throw TensorError("ema: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        if (shadow_[i].size() != t.data().size())
            throw TensorError("ema: shape mismatch in " + params[i].name);
        std::swap(shadow_[i], t.mutable_data());
    }
}

LossParts compute_loss(CaflowModel& model, const Tensor& w_int, const Tensor& y_int,
                       float lambda, Rng& rng) {
    const Shape ws = w_int.shape();
    const std::int64_t dims = std::int64_t(ws.c) * ws.h * ws.w;
    const std::int64_t dims_y =
        std::int64_t(y_int.shape().c) * y_int.shape().h * y_int.shape().w;

    Tensor w_deq, log_q;  // log_q per batch, zero for uniform dequantization
    if (model.dequantizer()) {
        auto r = model.dequantizer()->dequantize(w_int, rng);
        w_deq = r.x_deq;
        log_q = r.log_q;
    } else {
        w_deq = uniform_dequantize(w_int, rng).first;
        log_q = Tensor(Shape(ws.b, 1, 1, 1), 0.0f);
    }
    Tensor y_deq = uniform_dequantize(y_int, rng).first;

    Tensor lp_cond = sub(model.conditional_log_prob(w_deq, y_deq), log_q);
    Tensor lp_y = model.flow_r().log_prob(y_deq);

    Tensor mean_cond = mean_all(lp_cond);
    Tensor mean_y = mean_all(lp_y);
    Tensor objective = add(mean_cond, mul(mean_y, lambda));
    Tensor loss = mul(neg(objective), 1.0f / float(dims));

    LossParts out;
    out.loss = loss;
    out.bpd_cond = bits_per_dim(double(mean_cond.item()), dims);
    out.bpd_y = bits_per_dim(double(mean_y.item()), dims_y);
    return out;
}

double validation_bpd(CaflowModel& model, const PairedDataset& ds,
                      const std::vector<Image>& items, int batch_size) {
    if (items.empty()) throw DataError("validation: empty split");
    NoGradGuard ng;
    double total_nats = 0.0;
    const std::int64_t dims =
        std::int64_t(3) * ds.image_size * ds.image_size;
    for (int start = 0; start < int(items.size()); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min<int>(start + batch_size, int(items.size())); ++i)
            idx.push_back(i);
        auto [y, w] = ds.tensor_batch(items, idx);
        // Center dequantization keeps validation deterministic.
        Tensor half_w(w.shape(), 0.5f), half_y(y.shape(), 0.5f);
        Rng dummy(0);
        Tensor w_deq = uniform_dequantize(w, dummy, &half_w).first;
        Tensor y_deq = uniform_dequantize(y, dummy, &half_y).first;
        Tensor lp = model.conditional_log_prob(w_deq, y_deq);
        for (float v : lp.data()) total_nats += double(v);
    }
    return bits_per_dim(total_nats / double(items.size()), dims);
}

namespace {

std::string checkpoint_name(std::int64_t iter) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "ckpt_%06lld.caflow", static_cast<long long>(iter));
    return buf;
}

}  // namespace

TrainResult train_loop(CaflowModel& model, const PairedDataset& ds, const TrainConfig& cfg,
                       Adam& opt, EmaShadow& ema, std::int64_t start_iter,
                       std::uint64_t start_rng_state, const TrainHooks& hooks) {
    validate_train_config(cfg);
    if (ds.train.empty()) throw DataError("training set is empty");
    if (ds.val.empty()) throw DataError("validation set is empty");

    ParamList params = model.params();
    Rng rng(cfg.seed);
    if (start_iter > 0) rng.set_state(start_rng_state);

    auto draw_batch = [&]() {
        std::vector<int> idx(std::size_t(cfg.batch_size));
        for (auto& i : idx) i = int(rng.next_u64() % ds.train.size());
        return idx;
    };

    TrainResult res;
    if (start_iter == 0) {
        // One throwaway forward so actnorm data-dependent init happens before
        // the baseline validation measurement.
        auto [y, w] = ds.tensor_batch(ds.train, draw_batch());
        NoGradGuard ng;
        Rng init_rng = rng.derive(0x171717);
        compute_loss(model, w, y, cfg.lambda, init_rng);
    }
    res.initial_val_bpd = validation_bpd(model, ds, ds.val, cfg.batch_size);

    const bool resuming_ema = !ema.empty();
    if (!resuming_ema) ema.init(params);

    int consecutive_skips = 0;
    double last_train_bpd = res.initial_val_bpd;

    auto write_checkpoint = [&](std::int64_t iter) {
        if (hooks.checkpoint_dir.empty()) return;
        fs::create_directories(hooks.checkpoint_dir);
        Checkpoint ck = snapshot(model, opt, ema, iter, rng.state(), hooks.config_text);
        const auto path = fs::path(hooks.checkpoint_dir) / checkpoint_name(iter);
        save_checkpoint(path.string(), ck);
        save_checkpoint((fs::path(hooks.checkpoint_dir) / "latest.caflow").string(), ck);
    };

    for (std::int64_t iter = start_iter; iter < cfg.max_iters; ++iter) {
        auto [y, w] = ds.tensor_batch(ds.train, draw_batch());
        for (auto& p : params) p.tensor.zero_grad();

        bool skipped = false;
        double pre_clip_norm = 0.0;
        LossParts lp;
        try {
            lp = compute_loss(model, w, y, cfg.lambda, rng);
            if (!std::isfinite(lp.loss.item())) throw NumericError("non-finite loss");
            lp.loss.backward();
            pre_clip_norm = clip_gradients(params, cfg.grad_clip_norm);
            (void)pre_clip_norm;
        } catch (const NumericError&) {
            skipped = true;
        } catch (const TensorError&) {
            skipped = true;
        }

        if (skipped) {
            ++res.skipped_steps;
            if (++consecutive_skips > 10)
                throw NumericError("aborting: more than 10 consecutive non-finite steps at iteration " +
                                   std::to_string(iter));
            res.train_bpd_history.push_back(last_train_bpd);
            continue;
        }
        consecutive_skips = 0;

        const double lr = lr_schedule(cfg, iter);
        opt.step(params, lr);
        ema.update(params, cfg.ema_rate);
        last_train_bpd = lp.bpd_cond;
        res.train_bpd_history.push_back(lp.bpd_cond);
        res.iterations = iter + 1;

        const std::int64_t done = iter + 1;
        if (done % cfg.val_interval == 0 || done == cfg.max_iters) {
            ema.swap_into(params);
            const double vb = validation_bpd(model, ds, ds.val, cfg.batch_size);
            ema.swap_into(params);
            if (hooks.metrics)
                (*hooks.metrics) << done << ", " << lp.bpd_cond << ", " << vb << ", " << lr
                                 << "\n"
                                 << std::flush;
            res.final_val_bpd = vb;
        }
        if (done % cfg.checkpoint_interval == 0 || done == cfg.max_iters)
            write_checkpoint(done);
    }

    if (res.final_val_bpd == 0.0) {
        ema.swap_into(params);
        res.final_val_bpd = validation_bpd(model, ds, ds.val, cfg.batch_size);
        ema.swap_into(params);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

void put_u16(std::string& b, std::uint16_t v) {
    b.push_back(char(v & 0xff));
    b.push_back(char(v >> 8));
}
void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f32s(std::string& b, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(b, u);
    }
}

struct Reader {
    const std::string& b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (b.size() - pos < n) throw DataError("checkpoint: truncated file");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(std::uint8_t(b[pos])) |
                          std::uint16_t(std::uint8_t(b[pos + 1])) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(b[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(b[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b.substr(pos, n);
        pos += n;
        return s;
    }
    std::vector<float> f32s(std::size_t n) {
        need(4 * n);
        std::vector<float> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t u = 0;
            for (int k = 0; k < 4; ++k)
                u |= std::uint32_t(std::uint8_t(b[pos + 4 * i + k])) << (8 * k);
            std::memcpy(&v[i], &u, 4);
        }
        pos += 4 * n;
        return v;
    }
};

void put_f32_sections(std::string& buf, const std::vector<std::vector<float>>& vs) {
    put_u32(buf, std::uint32_t(vs.size()));
    for (const auto& v : vs) {
        put_u32(buf, std::uint32_t(v.size()));
        put_f32s(buf, v);
    }
}

std::vector<std::vector<float>> read_f32_sections(Reader& r) {
    const std::uint32_t n = r.u32();
    std::vector<std::vector<float>> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t len = r.u32();
        out.push_back(r.f32s(len));
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string buf;
    buf += "CAFW";
    put_u16(buf, ck.version);
    put_u32(buf, std::uint32_t(ck.config_text.size()));
    buf += ck.config_text;
    put_u64(buf, std::uint64_t(ck.iteration));
    put_u64(buf, ck.rng_state);
    put_u64(buf, std::uint64_t(ck.adam_t));
    put_u32(buf, std::uint32_t(ck.params.size()));
    for (const auto& p : ck.params) {
        put_u32(buf, std::uint32_t(p.name.size()));
        buf += p.name;
        const Shape s = p.tensor.shape();
        put_u32(buf, std::uint32_t(s.b));
        put_u32(buf, std::uint32_t(s.c));
        put_u32(buf, std::uint32_t(s.h));
        put_u32(buf, std::uint32_t(s.w));
        put_f32s(buf, p.tensor.data());
    }
    put_f32_sections(buf, ck.adam_m);
    put_f32_sections(buf, ck.adam_v);
    put_f32_sections(buf, ck.ema);
    const auto crc = std::uint32_t(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size())));
    put_u32(buf, crc);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw DataError("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < 10 || buf.compare(0, 4, "CAFW") != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const std::string body = buf.substr(0, buf.size() - 4);
    Reader tail{buf, buf.size() - 4};
    const std::uint32_t stored = tail.u32();
    const auto actual = std::uint32_t(
        crc32(0, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size())));
    if (stored != actual) throw DataError("checkpoint: CRC mismatch in " + path);

    Reader r{body, 4};
    Checkpoint ck;
    ck.version = r.u16();
    if (ck.version != 1)
        throw DataError("checkpoint: unsupported version " + std::to_string(ck.version));
    ck.config_text = r.bytes(r.u32());
    ck.iteration = std::int64_t(r.u64());
    ck.rng_state = r.u64();
    ck.adam_t = std::int64_t(r.u64());
    const std::uint32_t n_params = r.u32();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        NamedParam p;
        p.name = r.bytes(r.u32());
        const int b = int(r.u32()), c = int(r.u32()), h = int(r.u32()), w = int(r.u32());
        const Shape s(b, c, h, w);
        p.tensor = Tensor::from_data(s, r.f32s(std::size_t(s.numel())));
        ck.params.push_back(std::move(p));
    }
    ck.adam_m = read_f32_sections(r);
    ck.adam_v = read_f32_sections(r);
    ck.ema = read_f32_sections(r);
    if (r.pos != body.size()) throw DataError("checkpoint: trailing bytes in " + path);
    return ck;
}

Checkpoint snapshot(CaflowModel& model, Adam& opt, EmaShadow& ema, std::int64_t iteration,
                    std::uint64_t rng_state, const std::string& config_text) {
    Checkpoint ck;
    ck.config_text = config_text;
    ck.iteration = iteration;
    ck.rng_state = rng_state;
    ck.adam_t = opt.t();
    for (const auto& p : model.params())
        ck.params.push_back({p.name, p.tensor.clone()});
    ck.adam_m = opt.m();
    ck.adam_v = opt.v();
    ck.ema = ema.values();
    return ck;
}

void restore(const Checkpoint& ck, CaflowModel& model, Adam& opt, EmaShadow& ema) {
    ParamList live = model.params();
    if (live.size() != ck.params.size())
        throw DataError("checkpoint: parameter count mismatch (" +
                        std::to_string(ck.params.size()) + " stored, " +
                        std::to_string(live.size()) + " live)");
    for (std::size_t i = 0; i < live.size(); ++i) {
        if (live[i].name != ck.params[i].name)
            throw DataError("checkpoint: parameter name mismatch at index " + std::to_string(i) +
                            " (" + ck.params[i].name + " vs " + live[i].name + ")");
        if (live[i].tensor.shape() != ck.params[i].tensor.shape())
            throw DataError("checkpoint: shape mismatch in " + live[i].name);
        live[i].tensor.mutable_data() = ck.params[i].tensor.data();
    }
    model.set_actnorm_initialized(true);
    opt.set_t(ck.adam_t);
    opt.m() = ck.adam_m;
    opt.v() = ck.adam_v;
    ema.values() = ck.ema;
}

}  // namespace caflow
