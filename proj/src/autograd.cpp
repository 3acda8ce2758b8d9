#include "cryobsn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "autograd_internal.hpp"
#include "cryobsn/shuffle.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn::ag {

namespace {

thread_local bool g_grad_enabled = true;

void accumulate(Tensor& dst, const Tensor& src) {
    const int64_t n = dst.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i) dst.v[static_cast<size_t>(i)] += src.v[static_cast<size_t>(i)];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw std::runtime_error(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                 b.shape().str());
}

double det_sum_sq_diff(const double* a, const double* b, int64_t n) {
    constexpr int64_t kChunk = 4096;
    const int64_t nchunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t c = 0; c < nchunks; ++c) {
        const int64_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) {
            const double d = a[i] - b[i];
            s += d * d;
        }
        partial[static_cast<size_t>(c)] = s;
    }
    double s = 0.0;
    for (double p : partial) s += p;
    return s;
}

} // namespace

NoGradGuard::NoGradGuard() { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = true; }
bool grad_enabled() { return g_grad_enabled; }

Var Var::leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return Var(n);
}

Var make_node(Tensor val, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    bool rg = false;
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
    if (rg && g_grad_enabled) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Var(n);
}

void backward(const Var& root) {
    if (!root.defined() || root.val().numel() != 1)
        throw std::runtime_error("backward: root must be a single-element tensor");
    Node* rn = root.node().get();
    if (!rn->requires_grad) return;
    // reverse DFS post-order = topological order with consumers first
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(rn, 0);
    visited.insert(rn);
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            Node* p = top.first->parents[top.second++].get();
            if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }
    Tensor& g0 = rn->grad_buf();
    std::fill(g0.v.begin(), g0.v.end(), 0.0);
    g0.v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad) n->backward_fn(*n);
    }
}

// ---- normalization -----------------------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Shape5 s = x.shape();
    if (!(gamma.shape() == Shape5{1, s.c, 1, 1, 1}) || !(beta.shape() == Shape5{1, s.c, 1, 1, 1}))
        throw std::runtime_error("layer_norm: affine parameters must be [1,C,1,1,1]");
    const int64_t M = static_cast<int64_t>(s.c) * s.spatial();
    Tensor out(s);
    std::vector<double> mu(static_cast<size_t>(s.b)), inv_sigma(static_cast<size_t>(s.b));
    for (int b = 0; b < s.b; ++b) {
        const double* xp = x.val().data() + static_cast<int64_t>(b) * M;
        const double m = det_sum(xp, M) / static_cast<double>(M);
        double var = 0.0;
        for (int64_t i = 0; i < M; ++i) var += (xp[i] - m) * (xp[i] - m);
        var /= static_cast<double>(M);
        mu[static_cast<size_t>(b)] = m;
        inv_sigma[static_cast<size_t>(b)] = 1.0 / std::sqrt(var + eps);
    }
    const int64_t spatial = s.spatial();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c) {
            const double g = gamma.val().v[static_cast<size_t>(c)];
            const double be = beta.val().v[static_cast<size_t>(c)];
            const double m = mu[static_cast<size_t>(b)], is = inv_sigma[static_cast<size_t>(b)];
            const double* xp = x.val().data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
            double* op = out.data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) op[i] = (xp[i] - m) * is * g + be;
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make_node(std::move(out), {xn, gn, bn}, [s, M, spatial, mu, inv_sigma, xn, gn, bn](Node& self) {
        const Tensor& g = self.grad;
        for (int b = 0; b < s.b; ++b) {
            const double m = mu[static_cast<size_t>(b)], is = inv_sigma[static_cast<size_t>(b)];
            const double* xp = xn->val.data() + static_cast<int64_t>(b) * M;
            const double* gp = g.data() + static_cast<int64_t>(b) * M;
            // sums of gamma*g and gamma*g*xhat over the sample
            double s1 = 0.0, s2 = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const double ga = gn->val.v[static_cast<size_t>(c)];
                const double* xc = xp + static_cast<int64_t>(c) * spatial;
                const double* gc = gp + static_cast<int64_t>(c) * spatial;
                for (int64_t i = 0; i < spatial; ++i) {
                    const double gg = ga * gc[i];
                    s1 += gg;
                    s2 += gg * (xc[i] - m) * is;
                }
            }
            s1 /= static_cast<double>(M);
            s2 /= static_cast<double>(M);
            if (xn->requires_grad) {
                Tensor& gx = xn->grad_buf();
                double* gxp = gx.data() + static_cast<int64_t>(b) * M;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int c = 0; c < s.c; ++c) {
                    const double ga = gn->val.v[static_cast<size_t>(c)];
                    const double* xc = xp + static_cast<int64_t>(c) * spatial;
                    const double* gc = gp + static_cast<int64_t>(c) * spatial;
                    double* gxc = gxp + static_cast<int64_t>(c) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        const double xhat = (xc[i] - m) * is;
                        gxc[i] += (ga * gc[i] - s1 - xhat * s2) * is;
                    }
                }
            }
        }
        if (gn->requires_grad || bn->requires_grad) {
            Tensor* ggam = gn->requires_grad ? &gn->grad_buf() : nullptr;
            Tensor* gbet = bn->requires_grad ? &bn->grad_buf() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int c = 0; c < s.c; ++c) {
                double sg = 0.0, sb = 0.0;
                for (int b = 0; b < s.b; ++b) {
                    const double m = mu[static_cast<size_t>(b)], is = inv_sigma[static_cast<size_t>(b)];
                    const double* xc = xn->val.data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
                    const double* gc = self.grad.data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        sg += gc[i] * (xc[i] - m) * is;
                        sb += gc[i];
                    }
                }
                if (ggam) ggam->v[static_cast<size_t>(c)] += sg;
                if (gbet) gbet->v[static_cast<size_t>(c)] += sb;
            }
        }
    });
}

Var layer_norm_channel(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Shape5 s = x.shape();
    if (groups < 1 || s.c % groups != 0)
        throw std::runtime_error("layer_norm_channel: channels not divisible by groups");
    if (!(gamma.shape() == Shape5{1, s.c, 1, 1, 1}) || !(beta.shape() == Shape5{1, s.c, 1, 1, 1}))
        throw std::runtime_error("layer_norm_channel: affine parameters must be [1,C,1,1,1]");
    const int Gc = s.c / groups;
    const int64_t spatial = s.spatial();
    Tensor out(s);
    const double* gam = gamma.val().data();
    const double* bet = beta.val().data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < s.b; ++b)
        for (int64_t p = 0; p < spatial; ++p) {
            const double* xb = x.val().data() + static_cast<int64_t>(b) * s.c * spatial;
            double* ob = out.data() + static_cast<int64_t>(b) * s.c * spatial;
            for (int g = 0; g < groups; ++g) {
                double m = 0.0;
                for (int j = 0; j < Gc; ++j) m += xb[static_cast<int64_t>(g * Gc + j) * spatial + p];
                m /= Gc;
                double var = 0.0;
                for (int j = 0; j < Gc; ++j) {
                    const double d = xb[static_cast<int64_t>(g * Gc + j) * spatial + p] - m;
                    var += d * d;
                }
                var /= Gc;
                const double is = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < Gc; ++j) {
                    const int c = g * Gc + j;
                    ob[static_cast<int64_t>(c) * spatial + p] =
                        (xb[static_cast<int64_t>(c) * spatial + p] - m) * is * gam[c] + bet[c];
                }
            }
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make_node(std::move(out), {xn, gn, bn}, [s, groups, Gc, spatial, eps, xn, gn, bn](Node& self) {
        const Tensor& g = self.grad;
        if (xn->requires_grad) {
            Tensor& gx = xn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int b = 0; b < s.b; ++b)
                for (int64_t p = 0; p < spatial; ++p) {
                    const double* xb = xn->val.data() + static_cast<int64_t>(b) * s.c * spatial;
                    const double* gb = g.data() + static_cast<int64_t>(b) * s.c * spatial;
                    double* gxb = gx.data() + static_cast<int64_t>(b) * s.c * spatial;
                    for (int gr = 0; gr < groups; ++gr) {
                        double m = 0.0;
                        for (int j = 0; j < Gc; ++j) m += xb[static_cast<int64_t>(gr * Gc + j) * spatial + p];
                        m /= Gc;
                        double var = 0.0;
                        for (int j = 0; j < Gc; ++j) {
                            const double d = xb[static_cast<int64_t>(gr * Gc + j) * spatial + p] - m;
                            var += d * d;
                        }
                        var /= Gc;
                        const double is = 1.0 / std::sqrt(var + eps);
                        double s1 = 0.0, s2 = 0.0;
                        for (int j = 0; j < Gc; ++j) {
                            const int c = gr * Gc + j;
                            const double gg = gn->val.v[static_cast<size_t>(c)] *
                                              gb[static_cast<int64_t>(c) * spatial + p];
                            s1 += gg;
                            s2 += gg * (xb[static_cast<int64_t>(c) * spatial + p] - m) * is;
                        }
                        s1 /= Gc;
                        s2 /= Gc;
                        for (int j = 0; j < Gc; ++j) {
                            const int c = gr * Gc + j;
                            const double xhat = (xb[static_cast<int64_t>(c) * spatial + p] - m) * is;
                            gxb[static_cast<int64_t>(c) * spatial + p] +=
                                (gn->val.v[static_cast<size_t>(c)] * gb[static_cast<int64_t>(c) * spatial + p] -
                                 s1 - xhat * s2) *
                                is;
                        }
                    }
                }
        }
        if (gn->requires_grad || bn->requires_grad) {
            Tensor* ggam = gn->requires_grad ? &gn->grad_buf() : nullptr;
            Tensor* gbet = bn->requires_grad ? &bn->grad_buf() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int c = 0; c < s.c; ++c) {
                const int gr = c / Gc;
                double sg = 0.0, sb = 0.0;
                for (int b = 0; b < s.b; ++b) {
                    const double* xb = xn->val.data() + static_cast<int64_t>(b) * s.c * spatial;
                    const double* gb = self.grad.data() + static_cast<int64_t>(b) * s.c * spatial;
                    for (int64_t p = 0; p < spatial; ++p) {
                        double m = 0.0;
                        for (int j = 0; j < Gc; ++j) m += xb[static_cast<int64_t>(gr * Gc + j) * spatial + p];
                        m /= Gc;
                        double var = 0.0;
                        for (int j = 0; j < Gc; ++j) {
                            const double d = xb[static_cast<int64_t>(gr * Gc + j) * spatial + p] - m;
                            var += d * d;
                        }
                        var /= Gc;
                        const double is = 1.0 / std::sqrt(var + eps);
                        const double xhat = (xb[static_cast<int64_t>(c) * spatial + p] - m) * is;
                        const double gv = gb[static_cast<int64_t>(c) * spatial + p];
                        sg += gv * xhat;
                        sb += gv;
                    }
                }
                if (ggam) ggam->v[static_cast<size_t>(c)] += sg;
                if (gbet) gbet->v[static_cast<size_t>(c)] += sb;
            }
        }
    });
}

// ---- gating / attention --------------------------------------------------------

Var simple_gate(const Var& x, int groups) {
    const Shape5 s = x.shape();
    if (groups < 1 || s.c % groups != 0)
        throw std::runtime_error("simple_gate: channels not divisible by groups");
    const int Gc = s.c / groups;
    if (Gc % 2 != 0)
        throw std::runtime_error("simple_gate: per-group channel count must be even, got " +
                                 std::to_string(Gc));
    const int half = Gc / 2;
    const int64_t spatial = s.spatial();
    Tensor out({s.b, s.c / 2, s.d, s.h, s.w});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < s.b; ++b)
        for (int co = 0; co < s.c / 2; ++co) {
            const int g = co / half, j = co % half;
            const double* a = x.val().data() + (static_cast<int64_t>(b) * s.c + g * Gc + j) * spatial;
            const double* m = x.val().data() + (static_cast<int64_t>(b) * s.c + g * Gc + half + j) * spatial;
            double* o = out.data() + (static_cast<int64_t>(b) * (s.c / 2) + co) * spatial;
            for (int64_t i = 0; i < spatial; ++i) o[i] = a[i] * m[i];
        }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [s, Gc, half, spatial, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& gx = xn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        for (int b = 0; b < s.b; ++b)
            for (int co = 0; co < s.c / 2; ++co) {
                const int g = co / half, j = co % half;
                const double* a = xn->val.data() + (static_cast<int64_t>(b) * s.c + g * Gc + j) * spatial;
                const double* m =
                    xn->val.data() + (static_cast<int64_t>(b) * s.c + g * Gc + half + j) * spatial;
                const double* go = self.grad.data() + (static_cast<int64_t>(b) * (s.c / 2) + co) * spatial;
                double* ga = gx.data() + (static_cast<int64_t>(b) * s.c + g * Gc + j) * spatial;
                double* gm = gx.data() + (static_cast<int64_t>(b) * s.c + g * Gc + half + j) * spatial;
                for (int64_t i = 0; i < spatial; ++i) {
                    ga[i] += go[i] * m[i];
                    gm[i] += go[i] * a[i];
                }
            }
    });
}

Var global_avg_pool(const Var& x) {
    const Shape5 s = x.shape();
    const int64_t spatial = s.spatial();
    Tensor out({s.b, s.c, 1, 1, 1});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bc = 0; bc < s.b * s.c; ++bc) {
        const double* p = x.val().data() + static_cast<int64_t>(bc) * spatial;
        double acc = 0.0;
        for (int64_t i = 0; i < spatial; ++i) acc += p[i];
        out.v[static_cast<size_t>(bc)] = acc / static_cast<double>(spatial);
    }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [s, spatial, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& gx = xn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int bc = 0; bc < s.b * s.c; ++bc) {
            const double gv = self.grad.v[static_cast<size_t>(bc)] / static_cast<double>(spatial);
            double* p = gx.data() + static_cast<int64_t>(bc) * spatial;
            for (int64_t i = 0; i < spatial; ++i) p[i] += gv;
        }
    });
}

Var channel_scale(const Var& x, const Var& a) {
    const Shape5 s = x.shape();
    if (!(a.shape() == Shape5{s.b, s.c, 1, 1, 1}))
        throw std::runtime_error("channel_scale: scale must be [B,C,1,1,1]");
    const int64_t spatial = s.spatial();
    Tensor out(s);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bc = 0; bc < s.b * s.c; ++bc) {
        const double av = a.val().v[static_cast<size_t>(bc)];
        const double* xp = x.val().data() + static_cast<int64_t>(bc) * spatial;
        double* op = out.data() + static_cast<int64_t>(bc) * spatial;
        for (int64_t i = 0; i < spatial; ++i) op[i] = xp[i] * av;
    }
    auto xn = x.node();
    auto an = a.node();
    return make_node(std::move(out), {xn, an}, [s, spatial, xn, an](Node& self) {
        if (xn->requires_grad) {
            Tensor& gx = xn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int bc = 0; bc < s.b * s.c; ++bc) {
                const double av = an->val.v[static_cast<size_t>(bc)];
                const double* gp = self.grad.data() + static_cast<int64_t>(bc) * spatial;
                double* gxp = gx.data() + static_cast<int64_t>(bc) * spatial;
                for (int64_t i = 0; i < spatial; ++i) gxp[i] += gp[i] * av;
            }
        }
        if (an->requires_grad) {
            Tensor& ga = an->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int bc = 0; bc < s.b * s.c; ++bc) {
                const double* gp = self.grad.data() + static_cast<int64_t>(bc) * spatial;
                const double* xp = xn->val.data() + static_cast<int64_t>(bc) * spatial;
                double acc = 0.0;
                for (int64_t i = 0; i < spatial; ++i) acc += gp[i] * xp[i];
                ga.v[static_cast<size_t>(bc)] += acc;
            }
        }
    });
}

Var channel_attention(const Var& x, const Var& wa, const Var& bias, int groups) {
    Var pooled = global_avg_pool(x);
    ConvOpts opt;
    opt.groups = groups;
    Var gates = conv3d(pooled, wa, bias, opt);
    return channel_scale(x, gates);
}

// ---- elementwise ------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const int64_t n = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
        out.v[static_cast<size_t>(i)] = a.val().v[static_cast<size_t>(i)] + b.val().v[static_cast<size_t>(i)];
    auto an = a.node();
    auto bn = b.node();
    return make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) accumulate(an->grad_buf(), self.grad);
        if (bn->requires_grad) accumulate(bn->grad_buf(), self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const int64_t n = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
        out.v[static_cast<size_t>(i)] = a.val().v[static_cast<size_t>(i)] - b.val().v[static_cast<size_t>(i)];
    auto an = a.node();
    auto bn = b.node();
    return make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) accumulate(an->grad_buf(), self.grad);
        if (bn->requires_grad) {
            Tensor& g = bn->grad_buf();
            const int64_t n2 = g.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < n2; ++i) g.v[static_cast<size_t>(i)] -= self.grad.v[static_cast<size_t>(i)];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const int64_t n = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
        out.v[static_cast<size_t>(i)] = a.val().v[static_cast<size_t>(i)] * b.val().v[static_cast<size_t>(i)];
    auto an = a.node();
    auto bn = b.node();
    return make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        const int64_t n2 = self.grad.numel();
        if (an->requires_grad) {
            Tensor& g = an->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < n2; ++i)
                g.v[static_cast<size_t>(i)] +=
                    self.grad.v[static_cast<size_t>(i)] * bn->val.v[static_cast<size_t>(i)];
        }
        if (bn->requires_grad) {
            Tensor& g = bn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < n2; ++i)
                g.v[static_cast<size_t>(i)] +=
                    self.grad.v[static_cast<size_t>(i)] * an->val.v[static_cast<size_t>(i)];
        }
    });
}

Var scale(const Var& a, double sfac) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.v[static_cast<size_t>(i)] = a.val().v[static_cast<size_t>(i)] * sfac;
    auto an = a.node();
    return make_node(std::move(out), {an}, [an, sfac](Node& self) {
        if (!an->requires_grad) return;
        Tensor& g = an->grad_buf();
        const int64_t n2 = g.numel();
        for (int64_t i = 0; i < n2; ++i)
            g.v[static_cast<size_t>(i)] += self.grad.v[static_cast<size_t>(i)] * sfac;
    });
}

Var leaky_relu(const Var& x, double slope) {
    Tensor out(x.shape());
    const int64_t n = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i) {
        const double v = x.val().v[static_cast<size_t>(i)];
        out.v[static_cast<size_t>(i)] = v > 0.0 ? v : slope * v;
    }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [xn, slope](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const int64_t n2 = g.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < n2; ++i)
            g.v[static_cast<size_t>(i)] += self.grad.v[static_cast<size_t>(i)] *
                                           (xn->val.v[static_cast<size_t>(i)] > 0.0 ? 1.0 : slope);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Shape5 sa = a.shape(), sb = b.shape();
    if (sa.b != sb.b || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
        throw std::runtime_error("concat_channels: non-channel dims differ");
    Tensor out({sa.b, sa.c + sb.c, sa.d, sa.h, sa.w});
    const int64_t spatial = sa.spatial();
    for (int bb = 0; bb < sa.b; ++bb) {
        std::copy_n(a.val().data() + static_cast<int64_t>(bb) * sa.c * spatial, sa.c * spatial,
                    out.data() + static_cast<int64_t>(bb) * (sa.c + sb.c) * spatial);
        std::copy_n(b.val().data() + static_cast<int64_t>(bb) * sb.c * spatial, sb.c * spatial,
                    out.data() + (static_cast<int64_t>(bb) * (sa.c + sb.c) + sa.c) * spatial);
    }
    auto an = a.node();
    auto bn = b.node();
    return make_node(std::move(out), {an, bn}, [sa, sb, spatial, an, bn](Node& self) {
        for (int bb = 0; bb < sa.b; ++bb) {
            if (an->requires_grad) {
                Tensor& g = an->grad_buf();
                const double* src = self.grad.data() + static_cast<int64_t>(bb) * (sa.c + sb.c) * spatial;
                double* dst = g.data() + static_cast<int64_t>(bb) * sa.c * spatial;
                for (int64_t i = 0; i < static_cast<int64_t>(sa.c) * spatial; ++i) dst[i] += src[i];
            }
            if (bn->requires_grad) {
                Tensor& g = bn->grad_buf();
                const double* src =
                    self.grad.data() + (static_cast<int64_t>(bb) * (sa.c + sb.c) + sa.c) * spatial;
                double* dst = g.data() + static_cast<int64_t>(bb) * sb.c * spatial;
                for (int64_t i = 0; i < static_cast<int64_t>(sb.c) * spatial; ++i) dst[i] += src[i];
            }
        }
    });
}

Var sqrt_eps(const Var& x, double eps2) {
    Tensor out(x.shape());
    const int64_t n = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
        out.v[static_cast<size_t>(i)] = std::sqrt(x.val().v[static_cast<size_t>(i)] + eps2);
    auto xn = x.node();
    auto on = out; // copy of values for the closure via self.val
    (void)on;
    return make_node(std::move(out), {xn}, [xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const int64_t n2 = g.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < n2; ++i)
            g.v[static_cast<size_t>(i)] +=
                self.grad.v[static_cast<size_t>(i)] * 0.5 / self.val.v[static_cast<size_t>(i)];
    });
}

Var channel_sum(const Var& x) {
    const Shape5 s = x.shape();
    Tensor out({s.b, 1, s.d, s.h, s.w});
    const int64_t spatial = s.spatial();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int b = 0; b < s.b; ++b) {
        double* op = out.data() + static_cast<int64_t>(b) * spatial;
        for (int64_t i = 0; i < spatial; ++i) op[i] = 0.0;
        for (int c = 0; c < s.c; ++c) {
            const double* xp = x.val().data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) op[i] += xp[i];
        }
    }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [s, spatial, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        for (int b = 0; b < s.b; ++b)
            for (int c = 0; c < s.c; ++c) {
                const double* gp = self.grad.data() + static_cast<int64_t>(b) * spatial;
                double* gxp = g.data() + (static_cast<int64_t>(b) * s.c + c) * spatial;
                for (int64_t i = 0; i < spatial; ++i) gxp[i] += gp[i];
            }
    });
}

Var mean_all(const Var& x) {
    const int64_t n = x.val().numel();
    Tensor out({1, 1, 1, 1, 1});
    out.v[0] = det_sum(x.val().data(), n) / static_cast<double>(n);
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [n, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const double gv = self.grad.v[0] / static_cast<double>(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < n; ++i) g.v[static_cast<size_t>(i)] += gv;
    });
}

Var mse(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse");
    const int64_t n = a.val().numel();
    Tensor out({1, 1, 1, 1, 1});
    out.v[0] = det_sum_sq_diff(a.val().data(), b.val().data(), n) / static_cast<double>(n);
    auto an = a.node();
    auto bn = b.node();
    return make_node(std::move(out), {an, bn}, [n, an, bn](Node& self) {
        const double coef = 2.0 * self.grad.v[0] / static_cast<double>(n);
        if (an->requires_grad) {
            Tensor& g = an->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < n; ++i)
                g.v[static_cast<size_t>(i)] +=
                    coef * (an->val.v[static_cast<size_t>(i)] - bn->val.v[static_cast<size_t>(i)]);
        }
        if (bn->requires_grad) {
            Tensor& g = bn->grad_buf();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < n; ++i)
                g.v[static_cast<size_t>(i)] -=
                    coef * (an->val.v[static_cast<size_t>(i)] - bn->val.v[static_cast<size_t>(i)]);
        }
    });
}

// ---- reindexing / resampling ----------------------------------------------------

Var unshuffle(const Var& x, int v) {
    Tensor out = volume_unshuffle(x.val(), v);
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [v, xn](Node& self) {
        if (!xn->requires_grad) return;
        accumulate(xn->grad_buf(), volume_shuffle(self.grad, v));
    });
}

Var shuffle(const Var& x, int v) {
    Tensor out = volume_shuffle(x.val(), v);
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [v, xn](Node& self) {
        if (!xn->requires_grad) return;
        accumulate(xn->grad_buf(), volume_unshuffle(self.grad, v));
    });
}

Var chan_transpose(const Var& x, int rows, int cols) {
    Tensor out = channel_transpose(x.val(), rows, cols);
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [rows, cols, xn](Node& self) {
        if (!xn->requires_grad) return;
        accumulate(xn->grad_buf(), channel_transpose(self.grad, cols, rows));
    });
}

Var max_pool(const Var& x, int v) {
    const Shape5 s = x.shape();
    if (v < 2) throw std::runtime_error("max_pool: factor must be >= 2");
    if (s.d % v != 0 || s.h % v != 0 || s.w % v != 0)
        throw std::runtime_error("max_pool: spatial dims not divisible by factor");
    Tensor out({s.b, s.c, s.d / v, s.h / v, s.w / v});
    const Shape5 o = out.shape();
    std::vector<int64_t> argmax(static_cast<size_t>(o.numel()));
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < o.b; ++b)
        for (int c = 0; c < o.c; ++c)
            for (int z = 0; z < o.d; ++z)
                for (int y = 0; y < o.h; ++y)
                    for (int xq = 0; xq < o.w; ++xq) {
                        double best = -1e300;
                        int64_t bi = -1;
                        for (int dz = 0; dz < v; ++dz)
                            for (int dy = 0; dy < v; ++dy)
                                for (int dx = 0; dx < v; ++dx) {
                                    const int64_t i = x.val().idx(b, c, z * v + dz, y * v + dy, xq * v + dx);
                                    const double xv = x.val().v[static_cast<size_t>(i)];
                                    if (xv > best) {
                                        best = xv;
                                        bi = i;
                                    }
                                }
                        const int64_t oi = out.idx(b, c, z, y, xq);
                        out.v[static_cast<size_t>(oi)] = best;
                        argmax[static_cast<size_t>(oi)] = bi;
                    }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [argmax = std::move(argmax), xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const int64_t n = self.grad.numel();
        // non-overlapping blocks: each input cell is hit by at most one output
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < n; ++i)
            g.v[static_cast<size_t>(argmax[static_cast<size_t>(i)])] += self.grad.v[static_cast<size_t>(i)];
    });
}

namespace {

struct LinAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;
};

LinAxis linear_axis(int in_dim, int v) {
    LinAxis ax;
    const int out_dim = in_dim * v;
    ax.i0.resize(static_cast<size_t>(out_dim));
    ax.i1.resize(static_cast<size_t>(out_dim));
    ax.w1.resize(static_cast<size_t>(out_dim));
    for (int x = 0; x < out_dim; ++x) {
        const double src = (x + 0.5) / v - 0.5;
        int i0 = static_cast<int>(std::floor(src));
        double w1 = src - i0;
        if (i0 < 0) {
            i0 = 0;
            w1 = 0.0;
        }
        int i1 = i0 + 1;
        if (i1 > in_dim - 1) {
            i1 = in_dim - 1;
            w1 = 0.0;
        }
        ax.i0[static_cast<size_t>(x)] = i0;
        ax.i1[static_cast<size_t>(x)] = i1;
        ax.w1[static_cast<size_t>(x)] = w1;
    }
    return ax;
}

} // namespace

Var upsample_trilinear(const Var& x, int v) {
    const Shape5 s = x.shape();
    if (v < 2) throw std::runtime_error("upsample_trilinear: factor must be >= 2");
    const LinAxis az = linear_axis(s.d, v), ay = linear_axis(s.h, v), axx = linear_axis(s.w, v);
    Tensor out({s.b, s.c, s.d * v, s.h * v, s.w * v});
    const Shape5 o = out.shape();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bc = 0; bc < o.b * o.c; ++bc) {
        const double* xp = x.val().data() + static_cast<int64_t>(bc) * s.spatial();
        double* op = out.data() + static_cast<int64_t>(bc) * o.spatial();
        for (int z = 0; z < o.d; ++z)
            for (int y = 0; y < o.h; ++y)
                for (int xq = 0; xq < o.w; ++xq) {
                    const double wz = az.w1[static_cast<size_t>(z)], wy = ay.w1[static_cast<size_t>(y)],
                                 wx = axx.w1[static_cast<size_t>(xq)];
                    double acc = 0.0;
                    for (int cz = 0; cz < 2; ++cz)
                        for (int cy = 0; cy < 2; ++cy)
                            for (int cx = 0; cx < 2; ++cx) {
                                const int iz = cz ? az.i1[static_cast<size_t>(z)] : az.i0[static_cast<size_t>(z)];
                                const int iy = cy ? ay.i1[static_cast<size_t>(y)] : ay.i0[static_cast<size_t>(y)];
                                const int ix =
                                    cx ? axx.i1[static_cast<size_t>(xq)] : axx.i0[static_cast<size_t>(xq)];
                                const double wgt = (cz ? wz : 1.0 - wz) * (cy ? wy : 1.0 - wy) *
                                                   (cx ? wx : 1.0 - wx);
                                acc += wgt * xp[(static_cast<int64_t>(iz) * s.h + iy) * s.w + ix];
                            }
                    op[(static_cast<int64_t>(z) * o.h + y) * o.w + xq] = acc;
                }
    }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [s, v, az, ay, axx, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const Shape5 o = self.grad.shape;
        // gather per input cell over the bounded window of influenced outputs
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int bc = 0; bc < s.b * s.c; ++bc) {
            const double* gp = self.grad.data() + static_cast<int64_t>(bc) * o.spatial();
            double* gxp = g.data() + static_cast<int64_t>(bc) * s.spatial();
            for (int iz = 0; iz < s.d; ++iz)
                for (int iy = 0; iy < s.h; ++iy)
                    for (int ix = 0; ix < s.w; ++ix) {
                        double acc = 0.0;
                        const int zlo = std::max(0, (iz - 1) * v), zhi = std::min(o.d, (iz + 2) * v);
                        const int ylo = std::max(0, (iy - 1) * v), yhi = std::min(o.h, (iy + 2) * v);
                        const int xlo = std::max(0, (ix - 1) * v), xhi = std::min(o.w, (ix + 2) * v);
                        for (int z = zlo; z < zhi; ++z) {
                            double wz = 0.0;
                            if (az.i0[static_cast<size_t>(z)] == iz) wz += 1.0 - az.w1[static_cast<size_t>(z)];
                            if (az.i1[static_cast<size_t>(z)] == iz) wz += az.w1[static_cast<size_t>(z)];
                            if (wz == 0.0) continue;
                            for (int y = ylo; y < yhi; ++y) {
                                double wy = 0.0;
                                if (ay.i0[static_cast<size_t>(y)] == iy) wy += 1.0 - ay.w1[static_cast<size_t>(y)];
                                if (ay.i1[static_cast<size_t>(y)] == iy) wy += ay.w1[static_cast<size_t>(y)];
                                if (wy == 0.0) continue;
                                for (int xq = xlo; xq < xhi; ++xq) {
                                    double wx = 0.0;
                                    if (axx.i0[static_cast<size_t>(xq)] == ix)
                                        wx += 1.0 - axx.w1[static_cast<size_t>(xq)];
                                    if (axx.i1[static_cast<size_t>(xq)] == ix)
                                        wx += axx.w1[static_cast<size_t>(xq)];
                                    if (wx == 0.0) continue;
                                    acc += wz * wy * wx * gp[(static_cast<int64_t>(z) * o.h + y) * o.w + xq];
                                }
                            }
                        }
                        gxp[(static_cast<int64_t>(iz) * s.h + iy) * s.w + ix] += acc;
                    }
        }
    });
}

Var tv_smooth(const Var& x, double eps) {
    const Shape5 s = x.shape();
    const int64_t N = x.val().numel();
    const double e2 = eps * eps;
    const int64_t spatial = s.spatial();
    // deterministic: per-(b,c) partials combined in order
    std::vector<double> partial(static_cast<size_t>(s.b) * s.c, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bc = 0; bc < s.b * s.c; ++bc) {
        const double* p = x.val().data() + static_cast<int64_t>(bc) * spatial;
        double acc = 0.0;
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int xq = 0; xq < s.w; ++xq) {
                    const int64_t i = (static_cast<int64_t>(z) * s.h + y) * s.w + xq;
                    if (z + 1 < s.d) {
                        const double d = p[i + static_cast<int64_t>(s.h) * s.w] - p[i];
                        acc += std::sqrt(d * d + e2);
                    }
                    if (y + 1 < s.h) {
                        const double d = p[i + s.w] - p[i];
                        acc += std::sqrt(d * d + e2);
                    }
                    if (xq + 1 < s.w) {
                        const double d = p[i + 1] - p[i];
                        acc += std::sqrt(d * d + e2);
                    }
                }
        partial[static_cast<size_t>(bc)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    Tensor out({1, 1, 1, 1, 1});
    out.v[0] = total / static_cast<double>(N);
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [s, N, e2, spatial, xn](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->grad_buf();
        const double g0 = self.grad.v[0] / static_cast<double>(N);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int bc = 0; bc < s.b * s.c; ++bc) {
            const double* p = xn->val.data() + static_cast<int64_t>(bc) * spatial;
            double* gp = g.data() + static_cast<int64_t>(bc) * spatial;
            for (int z = 0; z < s.d; ++z)
                for (int y = 0; y < s.h; ++y)
                    for (int xq = 0; xq < s.w; ++xq) {
                        const int64_t i = (static_cast<int64_t>(z) * s.h + y) * s.w + xq;
                        double acc = 0.0;
                        // successor terms: d/dx_i of sqrt((x_next - x_i)^2+e2) is -t
                        if (z + 1 < s.d) {
                            const double d = p[i + static_cast<int64_t>(s.h) * s.w] - p[i];
                            acc -= d / std::sqrt(d * d + e2);
                        }
                        if (y + 1 < s.h) {
                            const double d = p[i + s.w] - p[i];
                            acc -= d / std::sqrt(d * d + e2);
                        }
                        if (xq + 1 < s.w) {
                            const double d = p[i + 1] - p[i];
                            acc -= d / std::sqrt(d * d + e2);
                        }
                        // predecessor terms
                        if (z > 0) {
                            const double d = p[i] - p[i - static_cast<int64_t>(s.h) * s.w];
                            acc += d / std::sqrt(d * d + e2);
                        }
                        if (y > 0) {
                            const double d = p[i] - p[i - s.w];
                            acc += d / std::sqrt(d * d + e2);
                        }
                        if (xq > 0) {
                            const double d = p[i] - p[i - 1];
                            acc += d / std::sqrt(d * d + e2);
                        }
                        gp[i] += g0 * acc;
                    }
        }
    });
}

// ---- optimizer ------------------------------------------------------------------

void AdamState::init(const std::vector<Var>& params) {
    t = 0;
    m.clear();
    s.clear();
    for (const auto& p : params) {
        m.push_back(Tensor::zeros(p.shape()));
        s.push_back(Tensor::zeros(p.shape()));
    }
}

void adam_step(std::vector<Var>& params, AdamState& st) {
    if (st.m.size() != params.size() || st.s.size() != params.size())
        throw std::runtime_error("adam_step: state not initialized for these parameters");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& val = params[pi].mutable_val();
        const Tensor* grad = params[pi].has_grad() ? &params[pi].grad() : nullptr;
        Tensor& mm = st.m[pi];
        Tensor& ss = st.s[pi];
        const int64_t n = val.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < n; ++i) {
            const double g = grad ? grad->v[static_cast<size_t>(i)] : 0.0;
            double& m1 = mm.v[static_cast<size_t>(i)];
            double& s1 = ss.v[static_cast<size_t>(i)];
            m1 = st.beta1 * m1 + (1.0 - st.beta1) * g;
            s1 = st.beta2 * s1 + (1.0 - st.beta2) * g * g;
            const double mhat = m1 / bc1;
            const double shat = s1 / bc2;
            double p = val.v[static_cast<size_t>(i)] - st.lr * mhat / (std::sqrt(shat) + st.eps);
            // keep parameters on the f32 grid so checkpoints roundtrip exactly
            val.v[static_cast<size_t>(i)] = static_cast<double>(static_cast<float>(p));
        }
    }
}

} // namespace cryobsn::ag
