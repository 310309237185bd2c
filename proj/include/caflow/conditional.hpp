#pragma once

#include <memory>
#include <string>
#include <vector>

#include "caflow/flow.hpp"

namespace caflow {

enum class DependencyMode { Caflow, DualGlow };
enum class WeightSharing { Off, AppendixD };
enum class DequantMode { Uniform, Variational };

// One conditional sub-flow f_j^i: optional squeeze, two transition steps,
// M conditional flow steps, optional split. The conditioning tensor arrives
// at the sub-flow's input resolution and is squeezed alongside the activation.
class CondSubFlow {
public:
    CondSubFlow(int in_channels, int cond_channels, bool has_squeeze, bool has_split,
                int m_steps, int hidden, Rng& rng);

    struct Result {
        Tensor emitted;   // z_j^i
        Tensor cont;      // z'_{j-1}; empty (numel 0) when !has_split
        Tensor log_det;   // (B,1,1,1)
    };
    Result forward(const Tensor& x, const Tensor& cond);
    // Inverse: cont ignored when the sub-flow has no split.
    Tensor inverse(const Tensor& emitted, const Tensor& cont, const Tensor& cond) const;

    Shape emitted_shape(int batch, int in_side) const;
    Shape cont_shape(int batch, int in_side) const;
    bool has_split() const { return has_split_; }
    bool has_squeeze() const { return has_squeeze_; }
    int in_channels() const { return in_channels_; }
    int cond_channels() const { return cond_channels_; }

    void collect_params(const std::string& prefix, ParamList& out);
    void set_actnorm_initialized(bool v);

private:
    int in_channels_, cond_channels_;
    bool has_squeeze_, has_split_;
    std::vector<FlowStep> steps_;  // 2 transitions then M conditional steps
};

// F_i: sub-flows f_i^i ... f_0^i. conds[j] is the conditioning for f_j^i at
// its native (unsqueezed) resolution: d_i alone for j == i, concat(d_j, l_j)
// for j < i (zeros of that shape under the DUAL-GLOW ablation).
class ConditionalArFlow {
public:
    ConditionalArFlow(int level, std::vector<std::shared_ptr<CondSubFlow>> subflows,
                      std::vector<Shape> z_shapes_unit);

    struct Enc {
        std::vector<Tensor> z;  // z[j] = z_j^i for j = 0..level
        Tensor log_det;         // (B,1,1,1)
    };
    Enc encode(const Tensor& l_i, const std::vector<Tensor>& conds);
    Tensor decode(const std::vector<Tensor>& z, const std::vector<Tensor>& conds) const;

    // Shapes of [z_0^i, ..., z_i^i] for a given batch size.
    std::vector<Shape> z_shapes(int batch) const;
    int level() const { return level_; }
    const std::vector<std::shared_ptr<CondSubFlow>>& subflows() const { return sub_; }

private:
    int level_;
    std::vector<std::shared_ptr<CondSubFlow>> sub_;  // sub_[j] = f_j^i
    std::vector<Shape> z_shapes_unit_;               // batch == 1
};

struct ModelConfig {
    int n_scales = 2;
    int channels = 3;
    int image_size = 8;
    int k_steps_r = 4;    // flow steps per scale of the conditioning flow R
    int k_steps_t = 4;    // flow steps per scale of the conditioned flow T
    int m_cond_steps = 8; // conditional flow steps per sub-flow
    int hidden_uncond = 64;
    int hidden_cond = 32;
    int deq_steps = 4;
    DependencyMode mode = DependencyMode::Caflow;
    WeightSharing sharing = WeightSharing::Off;
    DequantMode dequant = DequantMode::Uniform;
};

// The full model: unconditional flows R (condition) and T (target) plus the
// conditional autoregressive flows F_0..F_{n-1}.
class CaflowModel {
public:
    CaflowModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    MultiScaleFlow& flow_r() { return *r_; }
    MultiScaleFlow& flow_t() { return *t_; }
    ConditionalArFlow& cond_flow(int i) { return flows_[std::size_t(i)]; }
    VariationalDequantizer* dequantizer() { return deq_ ? deq_.get() : nullptr; }

    // log p(w|y) in nats per batch element (B,1,1,1); w, y in model range.
    // The d-pyramid is computed without gradient flow into R.
    Tensor conditional_log_prob(const Tensor& w, const Tensor& y);

    // Same value regrouped: T's log-det plus each autoregressive component.
    struct Parts {
        Tensor log_det_t;
        std::vector<Tensor> components;  // per i: sum_j log N(z_j^i) + log_det_i
    };
    Parts conditional_log_prob_parts(const Tensor& w, const Tensor& y);

    Tensor conditional_sample(const Tensor& y, Rng& rng, float temperature);
    // Indices sorted by descending conditional log-likelihood, stable ties.
    std::vector<int> rank_samples(const Tensor& y, const std::vector<Tensor>& samples);

    ParamList params();
    // Number of distinct conditional sub-flow parameter groups:
    // n(n+1)/2 without sharing, 2n-1 with the shared scheme.
    int distinct_cond_group_count() const;
    void set_actnorm_initialized(bool v);

    // Conditioning tensors for F_i's sub-flow j, honoring the dependency mode.
    std::vector<Tensor> build_conds(int i, const std::vector<Tensor>& d,
                                    const std::vector<Tensor>& l) const;

private:
    ModelConfig cfg_;
    std::unique_ptr<MultiScaleFlow> r_, t_;
    std::vector<std::shared_ptr<CondSubFlow>> distinct_subflows_;
    std::vector<ConditionalArFlow> flows_;
    std::unique_ptr<VariationalDequantizer> deq_;
};

void validate_model_config(const ModelConfig& cfg);

}  // namespace caflow
