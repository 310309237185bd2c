#pragma once

#include <string>
#include <vector>

#include "caflow/layers.hpp"

namespace caflow {

struct FlowConfig {
    int n_scales = 2;
    int k_steps = 4;
    int channels = 3;
    int image_size = 8;
    int hidden = 64;
    InvConv1x1::Perm perm = InvConv1x1::Perm::HalfRotate;
};

// Hierarchical latents [L_{n-1},...,L_0]; levels[j] holds L_j, so index 0 is
// the coarsest/deepest entry and index n-1 the finest (side H/2).
struct LatentPyramid {
    std::vector<Tensor> levels;

    std::int64_t total_numel() const {
        std::int64_t n = 0;
        for (const auto& t : levels) n += t.numel();
        return n;
    }
};

// Shape of L_j for a (C,H) image with n scales, batch b.
std::vector<Shape> pyramid_shapes(int channels, int image_size, int n_scales, int batch);

struct EncodeResult {
    LatentPyramid pyramid;
    Tensor log_det;  // (B,1,1,1)
};

// Unconditional multi-scale flow: per scale, squeeze -> 2 transition steps ->
// K flow steps -> split (all but the last scale).
class MultiScaleFlow {
public:
    MultiScaleFlow(const FlowConfig& cfg, Rng& rng);

    EncodeResult encode(const Tensor& image);
    Tensor decode(const LatentPyramid& pyr) const;

    // Exact log-likelihood under a standard-normal prior on every level, nats,
    // per batch element (B,1,1,1).
    Tensor log_prob(const Tensor& image);
    Tensor sample(Rng& rng, float temperature, int batch = 1);

    std::vector<Shape> latent_shapes(int batch) const;
    void collect_params(const std::string& prefix, ParamList& out);
    void set_actnorm_initialized(bool v);
    const FlowConfig& config() const { return cfg_; }

private:
    FlowConfig cfg_;
    std::vector<std::vector<FlowStep>> scales_;  // 2 transitions + K steps each
};

// bpd for 8-bit data: the +log(256) per dimension converts the density on the
// [0,1) model range back to a discrete likelihood.
double bits_per_dim(double log_prob_nats, std::int64_t dims);

// Uniform dequantization: (x + u)/256 with u ~ U[0,1). Returns the dequantized
// tensor and the per-sample nats correction D*log(256). A non-null forced_u
// (test hook) replaces the noise.
std::pair<Tensor, double> uniform_dequantize(const Tensor& x_int, Rng& rng,
                                             const Tensor* forced_u = nullptr);

// Learned dequantization: a small conditional flow maps Gaussian noise to
// u in (0,1) per pixel via a sigmoid, conditioned on the quantized image.
class VariationalDequantizer {
public:
    VariationalDequantizer(int channels, int steps, int hidden, Rng& rng);

    struct Result {
        Tensor x_deq;   // in [x/256, (x+1)/256)
        Tensor log_q;   // (B,1,1,1), log q(u|x), subtract from data log-lik
    };
    Result dequantize(const Tensor& x_int, Rng& rng);

    void collect_params(const std::string& prefix, ParamList& out);
    void set_actnorm_initialized(bool v);

private:
    int channels_;
    std::vector<FlowStep> steps_;
};

// Adds N(0, stddev^2) noise to every parameter in the list (test helper for
// exercising non-identity flows) and marks nothing; actnorms stay as-is.
void perturb_params(const ParamList& params, Rng& rng, float stddev);

}  // namespace caflow
