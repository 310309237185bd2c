#include "doctest.h"

#include <cmath>

#include "caflow/layers.hpp"
#include "util.hpp"

using namespace caflow;
using testutil::fd_jacobian_log_det;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("actnorm data-dependent initialization normalizes the first batch") {
    Rng rng(1);
    ActNorm an(3, true);
    Tensor x = add(mul(random_tensor(Shape(8, 3, 4, 4), rng), 2.5f), 1.0f);
    LayerOutput out = an.forward(x);
    CHECK(an.initialized());

    // Per-channel mean ~0, variance ~1 after the init batch.
    const Shape s = out.y.shape();
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int b = 0; b < s.b; ++b)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    const double v = out.y.at(b, c, h, w);
                    sum += v;
                    sq += v * v;
                }
        const double n = double(s.b) * s.h * s.w;
        CHECK(sum / n == doctest::Approx(0.0).epsilon(1e-4));
        CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-3));
    }
    CHECK(max_abs_diff(an.inverse(out.y), x) < 1e-4);
}

TEST_CASE("actnorm log-det matches the finite-difference Jacobian") {
    Rng rng(2);
    ActNorm an(2, true);
    an.forward(random_tensor(Shape(4, 2, 2, 2), rng));  // trigger init

    Tensor x = random_tensor(Shape(1, 2, 2, 2), rng);
    LayerOutput out = an.forward(x);
    const double fd =
        fd_jacobian_log_det([&](const Tensor& t) { return an.forward(t).y; }, x);
    CHECK(double(out.log_det.item()) == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("invertible 1x1 conv: round trip, log-det and permutation init") {
    Rng rng(3);
    for (auto perm : {InvConv1x1::Perm::Identity, InvConv1x1::Perm::HalfRotate}) {
        InvConv1x1 conv(4, perm);
        // Nudge the PLU factors off the initial permutation.
        ParamList ps;
        conv.collect_params("c", ps);
        for (auto& p : ps)
            for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);

        Tensor x = random_tensor(Shape(2, 4, 2, 2), rng);
        LayerOutput out = conv.forward(x);
        CHECK(max_abs_diff(conv.inverse(out.y), x) < 1e-4);

        Tensor x1 = random_tensor(Shape(1, 4, 2, 1), rng);
        const double fd =
            fd_jacobian_log_det([&](const Tensor& t) { return conv.forward(t).y; }, x1);
        CHECK(double(conv.forward(x1).log_det.item()) == doctest::Approx(fd).epsilon(1e-3));
    }
}

TEST_CASE("half-rotate permutation mixes channel halves at identity init") {
    InvConv1x1 conv(4, InvConv1x1::Perm::HalfRotate);
    Tensor x = Tensor::from_data(Shape(1, 4, 1, 1), {1, 2, 3, 4});
    Tensor y = conv.forward(x).y;
    // First output channels come from the second input half.
    CHECK(std::abs(y.data()[0]) == 3.0f);
    CHECK(std::abs(y.data()[1]) == 4.0f);
}

TEST_CASE("coupling net final conv is zero initialized") {
    Rng rng(4);
    CouplingNet net(2, 2, 8, rng);
    Tensor x = random_tensor(Shape(1, 2, 2, 2), rng);
    auto [raw_scale, bias] = net.forward(x);
    for (float v : raw_scale.data()) CHECK(v == 0.0f);
    for (float v : bias.data()) CHECK(v == 0.0f);
}

TEST_CASE("affine coupling is the identity at init and invertible after perturbation") {
    Rng rng(5);
    AffineCoupling cp(4, 8, rng);
    Tensor x = random_tensor(Shape(2, 4, 2, 2), rng);
    LayerOutput out = cp.forward(x);
    CHECK(max_abs_diff(out.y, x) == 0.0);
    for (float v : out.log_det.data()) CHECK(v == 0.0f);

    ParamList ps;
    cp.collect_params("cp", ps);
    for (auto& p : ps)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);
    out = cp.forward(x);
    CHECK(max_abs_diff(cp.inverse(out.y), x) < 1e-4);

    Tensor x1 = random_tensor(Shape(1, 2, 2, 2), rng);
    AffineCoupling cp2(2, 6, rng);
    ParamList ps2;
    cp2.collect_params("cp2", ps2);
    for (auto& p : ps2)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);
    const double fd =
        fd_jacobian_log_det([&](const Tensor& t) { return cp2.forward(t).y; }, x1);
    CHECK(double(cp2.forward(x1).log_det.item()) == doctest::Approx(fd).epsilon(1e-3));

    CHECK_THROWS_AS(AffineCoupling(3, 8, rng), TensorError);
}

TEST_CASE("conditional coupling round trip and log-det with fixed conditioning") {
    Rng rng(6);
    CondAffineCoupling cc(4, 3, 8, rng);
    ParamList ps;
    cc.collect_params("cc", ps);
    for (auto& p : ps)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);

    Tensor cond = random_tensor(Shape(2, 3, 2, 2), rng);
    Tensor x = random_tensor(Shape(2, 4, 2, 2), rng);
    LayerOutput out = cc.forward(x, cond);
    CHECK(max_abs_diff(cc.inverse(out.y, cond), x) < 1e-4);

    Tensor x1 = random_tensor(Shape(1, 2, 2, 2), rng);
    Tensor cond1 = random_tensor(Shape(1, 3, 2, 2), rng);
    CondAffineCoupling cc1(2, 3, 8, rng);
    ParamList ps1;
    cc1.collect_params("cc1", ps1);
    for (auto& p : ps1)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);
    const double fd = fd_jacobian_log_det(
        [&](const Tensor& t) { return cc1.forward(t, cond1).y; }, x1);
    CHECK(double(cc1.forward(x1, cond1).log_det.item()) == doctest::Approx(fd).epsilon(1e-3));

    CHECK_THROWS_AS(cc.forward(x, random_tensor(Shape(2, 3, 4, 4), rng)), TensorError);
}

TEST_CASE("affine injector transforms all channels from the conditioning alone") {
    Rng rng(7);
    AffineInjector inj(3, 2, 8, rng);
    ParamList ps;
    inj.collect_params("inj", ps);
    for (auto& p : ps)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);

    Tensor cond = random_tensor(Shape(1, 2, 2, 2), rng);
    Tensor x = random_tensor(Shape(1, 3, 2, 2), rng);
    LayerOutput out = inj.forward(x, cond);
    CHECK(max_abs_diff(inj.inverse(out.y, cond), x) < 1e-4);

    // The map in x is elementwise affine, so its Jacobian is diagonal.
    Tensor x1 = random_tensor(Shape(1, 2, 2, 2), rng);
    AffineInjector inj1(2, 2, 8, rng);
    ParamList ps1;
    inj1.collect_params("inj1", ps1);
    for (auto& p : ps1)
        for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.1);
    const double fd = fd_jacobian_log_det(
        [&](const Tensor& t) { return inj1.forward(t, cond).y; }, x1);
    CHECK(double(inj1.forward(x1, cond).log_det.item()) == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("squeeze step has zero log-det") {
    Rng rng(8);
    Tensor x = random_tensor(Shape(2, 3, 4, 4), rng);
    LayerOutput out = squeeze_fwd(x);
    for (float v : out.log_det.data()) CHECK(v == 0.0f);
    CHECK(max_abs_diff(squeeze_inv(out.y), x) == 0.0);
}

TEST_CASE("flow steps of every kind invert") {
    Rng rng(9);
    for (auto kind : {FlowStep::Kind::Transition, FlowStep::Kind::Uncond, FlowStep::Kind::Cond}) {
        FlowStep step(kind, 4, 3, 8, rng);
        step.set_actnorm_initialized(true);
        ParamList ps;
        step.collect_params("s", ps);
        for (auto& p : ps)
            for (auto& v : p.tensor.mutable_data()) v += float(rng.normal() * 0.05);

        Tensor cond = random_tensor(Shape(2, 3, 2, 2), rng);
        Tensor x = random_tensor(Shape(2, 4, 2, 2), rng);
        const Tensor* cp = kind == FlowStep::Kind::Cond ? &cond : nullptr;
        LayerOutput out = step.forward(x, cp);
        CHECK(max_abs_diff(step.inverse(out.y, cp), x) < 1e-4);
    }
}

TEST_CASE("gaussian log prob closed form") {
    Tensor x = Tensor::from_data(Shape(2, 1, 1, 2), {0, 0, 1, -1});
    Tensor lp = gaussian_log_prob(x);
    const double l2pi = std::log(2.0 * 3.14159265358979323846);
    CHECK(double(lp.data()[0]) == doctest::Approx(-l2pi));
    CHECK(double(lp.data()[1]) == doctest::Approx(-l2pi - 1.0));
}

TEST_CASE("coupling scale is bounded") {
    Tensor raw = Tensor::from_data(Shape(1, 1, 1, 3), {-100.0f, 0.0f, 100.0f});
    Tensor s = coupling_scale(raw);
    CHECK(s.data()[0] == doctest::Approx(-kCouplingScaleMax));
    CHECK(s.data()[1] == 0.0f);
    CHECK(s.data()[2] == doctest::Approx(kCouplingScaleMax));
}
