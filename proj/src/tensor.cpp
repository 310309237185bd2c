#include "caflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace caflow {

std::string Shape::str() const {
    std::ostringstream os;
    os << "(" << b << "," << c << "," << h << "," << w << ")";
    return os.str();
}

namespace {

bool g_finite_checks = true;
thread_local bool g_grad_enabled = true;

void check_finite(const std::vector<float>& v, const char* op) {
    if (!g_finite_checks) return;
    for (float x : v) {
        if (!std::isfinite(x))
            throw TensorError(std::string("non-finite value produced by op '") + op + "'");
    }
}

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor::Tensor(Shape s, float fill, bool requires_grad) {
    if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw TensorError("negative shape dimension");
    n_ = std::make_shared<detail::Node>();
    n_->shape = s;
    n_->data.assign(std::size_t(s.numel()), fill);
    n_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(Shape s, std::vector<float> data, bool requires_grad) {
    if (std::int64_t(data.size()) != s.numel())
        throw TensorError("data length " + std::to_string(data.size()) + " does not match shape " + s.str());
    Tensor t(s, 0.0f, requires_grad);
    t.n_->data = std::move(data);
    check_finite(t.n_->data, "from_data");
    return t;
}

Tensor Tensor::scalar(float v) { return from_data(Shape(1, 1, 1, 1), {v}); }

const std::vector<float>& Tensor::grad() const {
    n_->ensure_grad();
    return n_->grad;
}

void Tensor::zero_grad() { n_->grad.assign(n_->data.size(), 0.0f); }

Tensor Tensor::detach() const {
    Tensor t(shape());
    t.n_->data = n_->data;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t(shape());
    t.n_->data = n_->data;
    t.n_->requires_grad = n_->requires_grad;
    return t;
}

float Tensor::item() const {
    if (numel() != 1) throw TensorError("item() on non-scalar tensor " + shape().str());
    return n_->data[0];
}

float Tensor::at(int b, int c, int h, int w) const {
    const Shape& s = n_->shape;
    return n_->data[((std::size_t(b) * s.c + c) * s.h + h) * s.w + w];
}

void Tensor::backward() const {
    if (numel() != 1) throw TensorError("backward() requires a scalar root");
    if (!n_->requires_grad) throw TensorError("backward() on a tensor outside the autograd tape");
    // Topological order via iterative post-order DFS over parents.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    if (n_->requires_grad) {
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    for (detail::Node* node : order) node->ensure_grad();
    n_->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward) node->backward(*node);
    }
}

Tensor make_op(Shape s, std::vector<float> data, std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward, const char* name) {
    check_finite(data, name);
    auto node = std::make_shared<detail::Node>();
    node->shape = s;
    node->data = std::move(data);
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    }
    node->requires_grad = rg;
    if (rg) {
        for (const Tensor& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

namespace {

// Broadcast kinds supported for the second operand.
enum class Bcast { Same, Channel, Scalar };

Bcast bcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Bcast::Same;
    if (b.b == 1 && b.h == 1 && b.w == 1) {
        if (b.c == 1) return Bcast::Scalar;
        if (b.c == a.c) return Bcast::Channel;
    }
    throw TensorError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

std::size_t bcast_index(Bcast k, const Shape& a, std::size_t i) {
    switch (k) {
        case Bcast::Same:
            return i;
        case Bcast::Scalar:
            return 0;
        case Bcast::Channel: {
            std::size_t hw = std::size_t(a.h) * a.w;
            return (i / hw) % std::size_t(a.c);
        }
    }
    return 0;
}

// Accumulate g (shaped like a) into the broadcast operand's grad.
void bcast_accumulate(Bcast k, const Shape& a, const std::vector<float>& g,
                      std::vector<float>& out) {
    if (k == Bcast::Same) {
        for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    } else if (k == Bcast::Scalar) {
        double acc = 0.0;
        for (float v : g) acc += v;
        out[0] += float(acc);
    } else {
        std::size_t hw = std::size_t(a.h) * a.w;
        for (int c = 0; c < a.c; ++c) {
            double acc = 0.0;
            for (int b = 0; b < a.b; ++b) {
                const float* p = g.data() + (std::size_t(b) * a.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            }
            out[c] += float(acc);
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a.shape(), b.shape(), "add");
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<float> out(ad.size());
    Shape s = a.shape();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[bcast_index(k, s, i)];
    auto an = a.node();
    auto bn = b.node();
    return make_op(
        s, std::move(out), {a, b},
        [an, bn, k, s](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                bcast_accumulate(k, s, self.grad, bn->grad);
            }
        },
        "add");
}

Tensor add(const Tensor& a, float sc) {
    const auto& ad = a.data();
    std::vector<float> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + sc;
    auto an = a.node();
    return make_op(
        a.shape(), std::move(out), {a},
        [an](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        },
        "add_scalar");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a.shape(), b.shape(), "sub");
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<float> out(ad.size());
    Shape s = a.shape();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[bcast_index(k, s, i)];
    auto an = a.node();
    auto bn = b.node();
    return make_op(
        s, std::move(out), {a, b},
        [an, bn, k, s](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                std::vector<float> neg(self.grad.size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
                bcast_accumulate(k, s, neg, bn->grad);
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a.shape(), b.shape(), "mul");
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<float> out(ad.size());
    Shape s = a.shape();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[bcast_index(k, s, i)];
    auto an = a.node();
    auto bn = b.node();
    std::vector<float> av = ad, bv = bd;
    return make_op(
        s, std::move(out), {a, b},
        [an, bn, k, s, av = std::move(av), bv = std::move(bv)](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bv[bcast_index(k, s, i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                std::vector<float> g(self.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * av[i];
                bcast_accumulate(k, s, g, bn->grad);
            }
        },
        "mul");
}

Tensor mul(const Tensor& a, float sc) {
    const auto& ad = a.data();
    std::vector<float> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sc;
    auto an = a.node();
    return make_op(
        a.shape(), std::move(out), {a},
        [an, sc](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sc;
        },
        "mul_scalar");
}

Tensor neg(const Tensor& a) { return mul(a, -1.0f); }

namespace {

// Unary op with derivative expressed from input x and output y.
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfn, const char* name) {
    const auto& ad = a.data();
    std::vector<float> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
    auto an = a.node();
    std::vector<float> xv = ad, yv = out;
    return make_op(
        a.shape(), std::move(out), {a},
        [an, dfn, xv = std::move(xv), yv = std::move(yv)](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * dfn(xv[i], yv[i]);
        },
        name);
}

}  // namespace

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp");
}

Tensor log(const Tensor& a) {
    for (float v : a.data())
        if (!(v > 0.0f)) throw TensorError("log requires strictly positive input");
    return unary_op(
        a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; }, "log");
}

Tensor log_abs(const Tensor& a) {
    for (float v : a.data())
        if (v == 0.0f) throw TensorError("log_abs requires nonzero input");
    return unary_op(
        a, [](float x) { return std::log(std::fabs(x)); }, [](float x, float) { return 1.0f / x; },
        "log_abs");
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; },
        "tanh");
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
    const Shape xs = x.shape();
    const Shape ks = kernels.shape();  // (Cout,Cin,kh,kw)
    const int cout = ks.b, cin = ks.c, kh = ks.h, kw = ks.w;
    if (cin != xs.c)
        throw TensorError("conv2d: channel mismatch, input has " + std::to_string(xs.c) +
                          " kernels expect " + std::to_string(cin));
    if (kh % 2 == 0 || kw % 2 == 0) throw TensorError("conv2d: kernel sides must be odd");
    if (bias.shape() != Shape(1, cout, 1, 1))
        throw TensorError("conv2d: bias must be shaped (1,Cout,1,1)");
    const int ph = kh / 2, pw = kw / 2;
    const int H = xs.h, W = xs.w;
    Shape os(xs.b, cout, H, W);
    std::vector<float> out(std::size_t(os.numel()));
    const auto& xd = x.data();
    const auto& kd = kernels.data();
    const auto& bd = bias.data();
    auto xat = [&](int b, int c, int i, int j) -> float {
        return xd[((std::size_t(b) * cin + c) * H + i) * W + j];
    };
    for (int b = 0; b < xs.b; ++b)
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = bd[co];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int u = 0; u < kh; ++u) {
                            int ii = i + u - ph;
                            if (ii < 0 || ii >= H) continue;
                            const float* krow = kd.data() + ((std::size_t(co) * cin + ci) * kh + u) * kw;
                            for (int v = 0; v < kw; ++v) {
                                int jj = j + v - pw;
                                if (jj < 0 || jj >= W) continue;
                                acc += double(krow[v]) * xat(b, ci, ii, jj);
                            }
                        }
                    out[((std::size_t(b) * cout + co) * H + i) * W + j] = float(acc);
                }
    auto xn = x.node();
    auto kn = kernels.node();
    auto bn = bias.node();
    std::vector<float> xv = xd, kv = kd;
    return make_op(
        os, std::move(out), {x, kernels, bias},
        [xn, kn, bn, xs, ks, xv = std::move(xv), kv = std::move(kv)](detail::Node& self) {
            const int cout = ks.b, cin = ks.c, kh = ks.h, kw = ks.w;
            const int ph = kh / 2, pw = kw / 2, H = xs.h, W = xs.w;
            const auto& g = self.grad;
            auto gat = [&](int b, int co, int i, int j) -> float {
                return g[((std::size_t(b) * cout + co) * H + i) * W + j];
            };
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int b = 0; b < xs.b; ++b)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j) {
                                double acc = 0.0;
                                for (int co = 0; co < cout; ++co)
                                    for (int u = 0; u < kh; ++u) {
                                        int ii = i - (u - ph);
                                        if (ii < 0 || ii >= H) continue;
                                        for (int v = 0; v < kw; ++v) {
                                            int jj = j - (v - pw);
                                            if (jj < 0 || jj >= W) continue;
                                            acc += double(kv[((std::size_t(co) * cin + ci) * kh + u) * kw + v]) *
                                                   gat(b, co, ii, jj);
                                        }
                                    }
                                xn->grad[((std::size_t(b) * cin + ci) * H + i) * W + j] += float(acc);
                            }
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v) {
                                double acc = 0.0;
                                for (int b = 0; b < xs.b; ++b)
                                    for (int i = 0; i < H; ++i) {
                                        int ii = i + u - ph;
                                        if (ii < 0 || ii >= H) continue;
                                        for (int j = 0; j < W; ++j) {
                                            int jj = j + v - pw;
                                            if (jj < 0 || jj >= W) continue;
                                            acc += double(gat(b, co, i, j)) *
                                                   xv[((std::size_t(b) * cin + ci) * H + ii) * W + jj];
                                        }
                                    }
                                kn->grad[((std::size_t(co) * cin + ci) * kh + u) * kw + v] += float(acc);
                            }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (int b = 0; b < xs.b; ++b)
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j) acc += gat(b, co, i, j);
                    bn->grad[co] += float(acc);
                }
            }
        },
        "conv2d");
}

std::pair<Tensor, Tensor> channel_split(const Tensor& x, int at) {
    const Shape s = x.shape();
    if (at <= 0 || at >= s.c)
        throw TensorError("channel_split: invalid split index " + std::to_string(at) + " for C=" +
                          std::to_string(s.c));
    Shape sa(s.b, at, s.h, s.w), sb(s.b, s.c - at, s.h, s.w);
    std::vector<float> da(std::size_t(sa.numel())), db(std::size_t(sb.numel()));
    const std::size_t hw = std::size_t(s.h) * s.w;
    const auto& xd = x.data();
    for (int b = 0; b < s.b; ++b) {
        const float* src = xd.data() + std::size_t(b) * s.c * hw;
        std::copy(src, src + std::size_t(at) * hw, da.begin() + std::size_t(b) * at * hw);
        std::copy(src + std::size_t(at) * hw, src + std::size_t(s.c) * hw,
                  db.begin() + std::size_t(b) * (s.c - at) * hw);
    }
    auto xn = x.node();
    auto bwd_first = [xn, s, at, hw](detail::Node& self) {
        xn->ensure_grad();
        for (int b = 0; b < s.b; ++b) {
            float* dst = xn->grad.data() + std::size_t(b) * s.c * hw;
            const float* g = self.grad.data() + std::size_t(b) * at * hw;
            for (std::size_t i = 0; i < std::size_t(at) * hw; ++i) dst[i] += g[i];
        }
    };
    auto bwd_second = [xn, s, at, hw](detail::Node& self) {
        xn->ensure_grad();
        const int cr = s.c - at;
        for (int b = 0; b < s.b; ++b) {
            float* dst = xn->grad.data() + (std::size_t(b) * s.c + at) * hw;
            const float* g = self.grad.data() + std::size_t(b) * cr * hw;
            for (std::size_t i = 0; i < std::size_t(cr) * hw; ++i) dst[i] += g[i];
        }
    };
    Tensor first = make_op(sa, std::move(da), {x}, bwd_first, "channel_split");
    Tensor second = make_op(sb, std::move(db), {x}, bwd_second, "channel_split");
    return {first, second};
}

Tensor channel_concat(const Tensor& a, const Tensor& b) {
    const Shape sa = a.shape(), sb = b.shape();
    if (sa.b != sb.b || sa.h != sb.h || sa.w != sb.w)
        throw TensorError("channel_concat: incompatible shapes " + sa.str() + " and " + sb.str());
    Shape s(sa.b, sa.c + sb.c, sa.h, sa.w);
    std::vector<float> out(std::size_t(s.numel()));
    const std::size_t hw = std::size_t(s.h) * s.w;
    for (int bi = 0; bi < s.b; ++bi) {
        std::copy(a.data().begin() + std::size_t(bi) * sa.c * hw,
                  a.data().begin() + std::size_t(bi + 1) * sa.c * hw,
                  out.begin() + std::size_t(bi) * s.c * hw);
        std::copy(b.data().begin() + std::size_t(bi) * sb.c * hw,
                  b.data().begin() + std::size_t(bi + 1) * sb.c * hw,
                  out.begin() + (std::size_t(bi) * s.c + sa.c) * hw);
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op(
        s, std::move(out), {a, b},
        [an, bn, s, sa, sb, hw](detail::Node& self) {
            for (int bi = 0; bi < s.b; ++bi) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    const float* g = self.grad.data() + std::size_t(bi) * s.c * hw;
                    float* dst = an->grad.data() + std::size_t(bi) * sa.c * hw;
                    for (std::size_t i = 0; i < std::size_t(sa.c) * hw; ++i) dst[i] += g[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    const float* g = self.grad.data() + (std::size_t(bi) * s.c + sa.c) * hw;
                    float* dst = bn->grad.data() + std::size_t(bi) * sb.c * hw;
                    for (std::size_t i = 0; i < std::size_t(sb.c) * hw; ++i) dst[i] += g[i];
                }
            }
        },
        "channel_concat");
}

namespace {

// Maps output flat index -> input flat index for the squeeze permutation.
std::size_t squeeze_src_index(const Shape& in, int b, int co, int i, int j) {
    int c = co / 4, k = co % 4;
    int ii = 2 * i + (k / 2), jj = 2 * j + (k % 2);
    return ((std::size_t(b) * in.c + c) * in.h + ii) * in.w + jj;
}

}  // namespace

Tensor squeeze2x(const Tensor& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw TensorError("squeeze2x: spatial dims must be even, got " + s.str());
    Shape os(s.b, s.c * 4, s.h / 2, s.w / 2);
    std::vector<float> out(std::size_t(os.numel()));
    const auto& xd = x.data();
    std::size_t idx = 0;
    for (int b = 0; b < os.b; ++b)
        for (int co = 0; co < os.c; ++co)
            for (int i = 0; i < os.h; ++i)
                for (int j = 0; j < os.w; ++j) out[idx++] = xd[squeeze_src_index(s, b, co, i, j)];
    auto xn = x.node();
    return make_op(
        os, std::move(out), {x},
        [xn, s, os](detail::Node& self) {
            xn->ensure_grad();
            std::size_t idx = 0;
            for (int b = 0; b < os.b; ++b)
                for (int co = 0; co < os.c; ++co)
                    for (int i = 0; i < os.h; ++i)
                        for (int j = 0; j < os.w; ++j)
                            xn->grad[squeeze_src_index(s, b, co, i, j)] += self.grad[idx++];
        },
        "squeeze2x");
}

Tensor unsqueeze2x(const Tensor& x) {
    const Shape s = x.shape();
    if (s.c % 4 != 0) throw TensorError("unsqueeze2x: channels must be divisible by 4");
    Shape os(s.b, s.c / 4, s.h * 2, s.w * 2);
    std::vector<float> out(std::size_t(os.numel()));
    const auto& xd = x.data();
    std::size_t idx = 0;
    for (int b = 0; b < s.b; ++b)
        for (int co = 0; co < s.c; ++co)
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j) out[squeeze_src_index(os, b, co, i, j)] = xd[idx++];
    auto xn = x.node();
    return make_op(
        os, std::move(out), {x},
        [xn, s, os](detail::Node& self) {
            xn->ensure_grad();
            std::size_t idx = 0;
            for (int b = 0; b < s.b; ++b)
                for (int co = 0; co < s.c; ++co)
                    for (int i = 0; i < s.h; ++i)
                        for (int j = 0; j < s.w; ++j)
                            xn->grad[idx++] += self.grad[squeeze_src_index(os, b, co, i, j)];
        },
        "unsqueeze2x");
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    auto xn = x.node();
    return make_op(
        Shape(1, 1, 1, 1), {float(acc)}, {x},
        [xn](detail::Node& self) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += self.grad[0];
        },
        "sum_all");
}

Tensor mean_all(const Tensor& x) { return mul(sum_all(x), 1.0f / float(x.numel())); }

Tensor sum_per_batch(const Tensor& x) {
    const Shape s = x.shape();
    const std::size_t chw = std::size_t(s.c) * s.h * s.w;
    std::vector<float> out(std::size_t(s.b));
    for (int b = 0; b < s.b; ++b) {
        double acc = 0.0;
        const float* p = x.data().data() + b * chw;
        for (std::size_t i = 0; i < chw; ++i) acc += p[i];
        out[b] = float(acc);
    }
    auto xn = x.node();
    return make_op(
        Shape(s.b, 1, 1, 1), std::move(out), {x},
        [xn, s, chw](detail::Node& self) {
            xn->ensure_grad();
            for (int b = 0; b < s.b; ++b) {
                float g = self.grad[b];
                float* dst = xn->grad.data() + b * chw;
                for (std::size_t i = 0; i < chw; ++i) dst[i] += g;
            }
        },
        "sum_per_batch");
}

Tensor expand_batch(const Tensor& scalar, int b) {
    if (scalar.numel() != 1) throw TensorError("expand_batch expects a scalar");
    std::vector<float> out(std::size_t(b), scalar.data()[0]);
    auto sn = scalar.node();
    return make_op(
        Shape(b, 1, 1, 1), std::move(out), {scalar},
        [sn](detail::Node& self) {
            sn->ensure_grad();
            double acc = 0.0;
            for (float g : self.grad) acc += g;
            sn->grad[0] += float(acc);
        },
        "expand_batch");
}

Tensor conv1x1_mat(const Tensor& x, const Tensor& w) {
    const Shape xs = x.shape();
    const Shape ws = w.shape();  // (1,1,Cout,Cin)
    if (ws.b != 1 || ws.c != 1 || ws.w != xs.c)
        throw TensorError("conv1x1_mat: weight shape " + ws.str() + " incompatible with input " +
                          xs.str());
    const int cout = ws.h, cin = ws.w;
    const std::size_t hw = std::size_t(xs.h) * xs.w;
    Shape os(xs.b, cout, xs.h, xs.w);
    std::vector<float> out(std::size_t(os.numel()), 0.0f);
    const auto& xd = x.data();
    const auto& wd = w.data();
    for (int b = 0; b < xs.b; ++b)
        for (int co = 0; co < cout; ++co) {
            float* dst = out.data() + (std::size_t(b) * cout + co) * hw;
            for (int ci = 0; ci < cin; ++ci) {
                const float wv = wd[std::size_t(co) * cin + ci];
                if (wv == 0.0f) continue;
                const float* src = xd.data() + (std::size_t(b) * cin + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] += wv * src[i];
            }
        }
    auto xn = x.node();
    auto wn = w.node();
    std::vector<float> xv = xd, wv = wd;
    return make_op(
        os, std::move(out), {x, w},
        [xn, wn, xs, cout, cin, hw, xv = std::move(xv), wv = std::move(wv)](detail::Node& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int b = 0; b < xs.b; ++b)
                    for (int ci = 0; ci < cin; ++ci) {
                        float* dst = xn->grad.data() + (std::size_t(b) * cin + ci) * hw;
                        for (int co = 0; co < cout; ++co) {
                            const float w0 = wv[std::size_t(co) * cin + ci];
                            const float* g = self.grad.data() + (std::size_t(b) * cout + co) * hw;
                            for (std::size_t i = 0; i < hw; ++i) dst[i] += w0 * g[i];
                        }
                    }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci) {
                        double acc = 0.0;
                        for (int b = 0; b < xs.b; ++b) {
                            const float* g = self.grad.data() + (std::size_t(b) * cout + co) * hw;
                            const float* src = xv.data() + (std::size_t(b) * cin + ci) * hw;
                            for (std::size_t i = 0; i < hw; ++i) acc += double(g[i]) * src[i];
                        }
                        wn->grad[std::size_t(co) * cin + ci] += float(acc);
                    }
            }
        },
        "conv1x1_mat");
}

Tensor matmul_sq(const Tensor& a, const Tensor& b) {
    const Shape as = a.shape(), bs = b.shape();
    if (as.b != 1 || as.c != 1 || bs.b != 1 || bs.c != 1 || as.w != bs.h)
        throw TensorError("matmul_sq: incompatible shapes " + as.str() + " and " + bs.str());
    const int n = as.h, m = as.w, p = bs.w;
    Shape os(1, 1, n, p);
    std::vector<float> out(std::size_t(n) * p, 0.0f);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < m; ++k) {
            const float av = ad[std::size_t(i) * m + k];
            if (av == 0.0f) continue;
            for (int j = 0; j < p; ++j) out[std::size_t(i) * p + j] += av * bd[std::size_t(k) * p + j];
        }
    auto an = a.node();
    auto bn = b.node();
    std::vector<float> av = ad, bv = bd;
    return make_op(
        os, std::move(out), {a, b},
        [an, bn, n, m, p, av = std::move(av), bv = std::move(bv)](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < m; ++k) {
                        double acc = 0.0;
                        for (int j = 0; j < p; ++j)
                            acc += double(self.grad[std::size_t(i) * p + j]) * bv[std::size_t(k) * p + j];
                        an->grad[std::size_t(i) * m + k] += float(acc);
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int k = 0; k < m; ++k)
                    for (int j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < n; ++i)
                            acc += double(av[std::size_t(i) * m + k]) * self.grad[std::size_t(i) * p + j];
                        bn->grad[std::size_t(k) * p + j] += float(acc);
                    }
            }
        },
        "matmul_sq");
}

std::uint64_t Rng::next_u64() {
    // splitmix64 (Steele et al.)
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double Rng::uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    // Box-Muller; one fresh pair per draw keeps the stream position simple.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Tensor Rng::uniform_tensor(Shape s) {
    std::vector<float> out(std::size_t(s.numel()));
    for (auto& v : out) v = float(uniform());
    return Tensor::from_data(s, std::move(out));
}

Tensor Rng::normal_tensor(Shape s, float temperature) {
    if (temperature < 0.0f) throw TensorError("normal_tensor: negative temperature");
    std::vector<float> out(std::size_t(s.numel()), 0.0f);
    if (temperature > 0.0f)
        for (auto& v : out) v = float(normal() * temperature);
    return Tensor::from_data(s, std::move(out));
}

Rng Rng::derive(std::uint64_t k) const {
    Rng r(state_ ^ (0xD1B54A32D192ED03ull * (k + 1)));
    r.next_u64();
    return r;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
    if (!(eps > 0.0)) throw TensorError("finite_diff_grad: eps must be positive");
    std::vector<float> g(x.data().size());
    Tensor probe = x.detach();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const float orig = probe.mutable_data()[i];
        probe.mutable_data()[i] = float(orig + eps);
        double fp = f(probe);
        probe.mutable_data()[i] = float(orig - eps);
        double fm = f(probe);
        probe.mutable_data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw TensorError("finite_diff_grad: non-finite objective");
        g[i] = float((fp - fm) / (2.0 * eps));
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

}  // namespace caflow
