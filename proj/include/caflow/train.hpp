#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "caflow/conditional.hpp"
#include "caflow/data.hpp"

namespace caflow {

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
    float lambda = 0.01f;
    float target_lr = 1e-3f;
    int warmup_iters = 500;
    float step_gamma = 0.999f;
    float ema_rate = 0.999f;
    float grad_clip_norm = 1.0f;
    int batch_size = 8;
    int max_iters = 2000;
    std::uint64_t seed = 0;
    float tau_eval = 0.5f;
    int best_of_m = 10;
    int val_interval = 100;
    int checkpoint_interval = 500;
    bool plateau_lr_drop = false;  // one-time manual /10 reduction
};

void validate_train_config(const TrainConfig& cfg);

// Linear warmup to target_lr over warmup_iters, then per-iteration geometric
// decay by step_gamma; the plateau flag divides the result by 10.
double lr_schedule(const TrainConfig& cfg, std::int64_t iter);

// Scales gradients so the global L2 norm is at most max_norm. Returns the
// pre-clip norm. Throws NumericError on non-finite gradients.
double clip_gradients(const ParamList& params, float max_norm);

class Adam {
public:
    Adam(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

    void step(const ParamList& params, double lr);

    std::int64_t t() const { return t_; }
    void set_t(std::int64_t t) { t_ = t; }
    std::vector<std::vector<float>>& m() { return m_; }
    std::vector<std::vector<float>>& v() { return v_; }

private:
    float beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;  // indexed like the ParamList
};

// Exponential moving average of parameters; evaluation swaps the shadow in.
class EmaShadow {
public:
    void init(const ParamList& params);
    void update(const ParamList& params, float rate);
    // Exchanges shadow and live values; call again to restore.
    void swap_into(const ParamList& params);
    bool empty() const { return shadow_.empty(); }
    std::vector<std::vector<float>>& values() { return shadow_; }

private:
    std::vector<std::vector<float>> shadow_;
};

struct LossParts {
    Tensor loss;        // scalar, nats per target dimension
    double bpd_cond;    // conditional bits/dim of w (with dequant correction)
    double bpd_y;       // unconditional bits/dim of y
};

// Negative (log p(w|y) + lambda log p(y)) per target dimension, batch-averaged.
// w and y are 8-bit batches in 0..255; dequantization follows the model config.
LossParts compute_loss(CaflowModel& model, const Tensor& w_int, const Tensor& y_int,
                       float lambda, Rng& rng);

// Conditional bpd of a dataset split under center dequantization (u = 0.5),
// so the value is deterministic. Used for validation and final reporting.
double validation_bpd(CaflowModel& model, const PairedDataset& ds,
                      const std::vector<Image>& items, int batch_size);

struct TrainResult {
    std::int64_t iterations = 0;
    double initial_val_bpd = 0.0;
    double final_val_bpd = 0.0;
    std::vector<double> train_bpd_history;  // one entry per iteration
    int skipped_steps = 0;
};

struct TrainHooks {
    std::ostream* metrics = nullptr;     // "iteration, train-bpd, val-bpd, lr"
    std::string checkpoint_dir;          // empty: no checkpoints written
    std::string config_text;             // embedded into checkpoints verbatim
};

// Full training loop: loss -> backward -> clip -> Adam -> EMA -> schedule.
// Non-finite losses or gradients skip the step; more than 10 consecutive
// skips abort with NumericError. Resumes from state.iteration when nonzero.
// start_rng_state is consulted only when resuming (start_iter > 0); a fresh
// run seeds from cfg.seed.
TrainResult train_loop(CaflowModel& model, const PairedDataset& ds, const TrainConfig& cfg,
                       Adam& opt, EmaShadow& ema, std::int64_t start_iter,
                       std::uint64_t start_rng_state, const TrainHooks& hooks);

// Checkpoint container: magic "CAFW", version u16, little-endian; embedded
// config text, iteration and RNG counters, named f32 parameter tensors,
// optimizer moments, EMA shadow, trailing CRC32.
struct Checkpoint {
    std::uint16_t version = 1;
    std::string config_text;
    std::int64_t iteration = 0;
    std::uint64_t rng_state = 0;
    std::int64_t adam_t = 0;
    std::vector<NamedParam> params;
    std::vector<std::vector<float>> adam_m, adam_v;
    std::vector<std::vector<float>> ema;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Assembles a checkpoint from live training state / applies one back.
Checkpoint snapshot(CaflowModel& model, Adam& opt, EmaShadow& ema, std::int64_t iteration,
                    std::uint64_t rng_state, const std::string& config_text);
void restore(const Checkpoint& ck, CaflowModel& model, Adam& opt, EmaShadow& ema);

}  // namespace caflow
