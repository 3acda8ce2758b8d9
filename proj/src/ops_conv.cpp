#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "cryobsn/autograd.hpp"

#include "autograd_internal.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn::ag {

KernelMask KernelMask::central(int k, int c) {
    if (k < 1 || k % 2 == 0) throw std::runtime_error("KernelMask: kernel size must be odd and positive");
    if (c < 0 || c > k || (c > 0 && c % 2 == 0))
        throw std::runtime_error("KernelMask: central block size must be odd (or 0) and <= k");
    KernelMask m;
    m.k = k;
    m.keep.assign(static_cast<size_t>(k) * k * k, 1);
    const int r = k / 2, cr = c / 2;
    if (c > 0) {
        for (int z = 0; z < k; ++z)
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x)
                    if (std::abs(z - r) <= cr && std::abs(y - r) <= cr && std::abs(x - r) <= cr)
                        m.keep[static_cast<size_t>((z * k + y) * k + x)] = 0;
    }
    return m;
}

int KernelMask::active_taps() const {
    int n = 0;
    for (uint8_t b : keep) n += b;
    return n;
}

namespace {

struct Tap {
    int oz, oy, ox; // input offset relative to output position (dilation applied)
    int widx;       // flat index into the k^3 kernel
};

std::vector<Tap> active_taps(int k, int dilation, const KernelMask* mask) {
    const int r = k / 2;
    std::vector<Tap> taps;
    taps.reserve(static_cast<size_t>(k) * k * k);
    for (int z = 0; z < k; ++z)
        for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x) {
                const int widx = (z * k + y) * k + x;
                if (mask && !mask->keep[static_cast<size_t>(widx)]) continue;
                taps.push_back({(z - r) * dilation, (y - r) * dilation, (x - r) * dilation, widx});
            }
    return taps;
}

// mirror-without-edge-repeat reflection of index i into [0, n)
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

std::vector<int> reflect_table(int n, int pad) {
    std::vector<int> t(static_cast<size_t>(n + 2 * pad));
    for (int i = 0; i < n + 2 * pad; ++i) t[static_cast<size_t>(i)] = reflect_index(i - pad, n);
    return t;
}

struct ConvDims {
    int B, Ci, Co, D, H, W, k, groups, Cig, Cog, pad;
};

ConvDims check_conv(const Shape5& xs, const Shape5& ws, const Var& bias, const ConvOpts& opt) {
    if (ws.d != ws.h || ws.d != ws.w)
        throw std::runtime_error("conv3d: kernel must be cubic, got " + ws.str());
    const int k = ws.d;
    if (k % 2 == 0) throw std::runtime_error("conv3d: kernel size must be odd, got " + std::to_string(k));
    if (opt.dilation < 1) throw std::runtime_error("conv3d: dilation must be >= 1");
    if (opt.groups < 1) throw std::runtime_error("conv3d: groups must be >= 1");
    if (xs.c % opt.groups != 0 || ws.b % opt.groups != 0)
        throw std::runtime_error("conv3d: channels not divisible by groups");
    if (ws.c != xs.c / opt.groups)
        throw std::runtime_error("conv3d: weight input channels (" + std::to_string(ws.c) +
                                 ") do not match input channels/groups (" +
                                 std::to_string(xs.c / opt.groups) + ")");
    if (opt.mask && opt.mask->k != k)
        throw std::runtime_error("conv3d: mask shape does not match kernel shape");
    if (bias.defined() && !(bias.shape() == Shape5{1, ws.b, 1, 1, 1}))
        throw std::runtime_error("conv3d: bias must be [1,Cout,1,1,1]");
    ConvDims cd;
    cd.B = xs.b;
    cd.Ci = xs.c;
    cd.Co = ws.b;
    cd.D = xs.d;
    cd.H = xs.h;
    cd.W = xs.w;
    cd.k = k;
    cd.groups = opt.groups;
    cd.Cig = xs.c / opt.groups;
    cd.Cog = ws.b / opt.groups;
    cd.pad = opt.dilation * (k - 1) / 2;
    if (opt.pad == PadMode::reflect && cd.pad >= std::min({cd.D, cd.H, cd.W}) && cd.pad > 0)
        throw std::runtime_error("conv3d: reflect padding requires pad < every spatial dim");
    return cd;
}

// ---- zero-padded kernels ---------------------------------------------------

void conv_forward_zero(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& out,
                       const ConvDims& cd, const std::vector<Tap>& taps) {
    const int64_t plane = static_cast<int64_t>(cd.H) * cd.W;
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int bco = 0; bco < cd.B * cd.Co; ++bco)
        for (int z = 0; z < cd.D; ++z) {
            const int b = bco / cd.Co, co = bco % cd.Co;
            const int g = co / cd.Cog;
            const double bval = bias ? bias->v[static_cast<size_t>(co)] : 0.0;
            std::vector<const Tap*> zy;
            zy.reserve(taps.size());
            for (int y = 0; y < cd.H; ++y) {
                zy.clear();
                for (const Tap& t : taps) {
                    const int iz = z + t.oz, iy = y + t.oy;
                    if (iz >= 0 && iz < cd.D && iy >= 0 && iy < cd.H) zy.push_back(&t);
                }
                double* orow = out.data() + out.idx(b, co, z, y, 0);
                for (int xq = 0; xq < cd.W; ++xq) orow[xq] = bval;
                for (int cig = 0; cig < cd.Cig; ++cig) {
                    const int ci = g * cd.Cig + cig;
                    const double* xch = x.data() + x.idx(b, ci, 0, 0, 0);
                    const double* wk = w.data() + (static_cast<int64_t>(co) * cd.Cig + cig) * k3;
                    for (const Tap* t : zy) {
                        const double wv = wk[t->widx];
                        const double* srow = xch + (static_cast<int64_t>(z + t->oz) * cd.H + (t->oy + y)) * cd.W + t->ox;
                        const int xlo = std::max(0, -t->ox);
                        const int xhi = std::min(cd.W, cd.W - t->ox);
                        for (int xq = xlo; xq < xhi; ++xq) orow[xq] += wv * srow[xq];
                    }
                }
            }
            (void)plane;
        }
}

void conv_backward_input_zero(const Tensor& gout, const Tensor& w, Tensor& gin, const ConvDims& cd,
                              const std::vector<Tap>& taps) {
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int bci = 0; bci < cd.B * cd.Ci; ++bci)
        for (int iz = 0; iz < cd.D; ++iz) {
            const int b = bci / cd.Ci, ci = bci % cd.Ci;
            const int g = ci / cd.Cig, cig = ci % cd.Cig;
            for (int iy = 0; iy < cd.H; ++iy) {
                double* grow = gin.data() + gin.idx(b, ci, iz, iy, 0);
                for (const Tap& t : taps) {
                    const int z = iz - t.oz, y = iy - t.oy;
                    if (z < 0 || z >= cd.D || y < 0 || y >= cd.H) continue;
                    const int xlo = std::max(0, t.ox);
                    const int xhi = std::min(cd.W, cd.W + t.ox);
                    for (int coq = 0; coq < cd.Cog; ++coq) {
                        const int co = g * cd.Cog + coq;
                        const double wv =
                            w.v[static_cast<size_t>((static_cast<int64_t>(co) * cd.Cig + cig) * k3 + t.widx)];
                        const double* gorow = gout.data() + gout.idx(b, co, z, y, -t.ox);
                        for (int ix = xlo; ix < xhi; ++ix) grow[ix] += wv * gorow[ix];
                    }
                }
            }
        }
}

void conv_backward_weight_zero(const Tensor& gout, const Tensor& x, Tensor& gw, const ConvDims& cd,
                               const std::vector<Tap>& taps) {
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
    const int64_t nt = static_cast<int64_t>(taps.size());
    const int64_t total = static_cast<int64_t>(cd.Co) * cd.Cig * nt;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t idx = 0; idx < total; ++idx) {
        const int co = static_cast<int>(idx / (cd.Cig * nt));
        const int cig = static_cast<int>((idx / nt) % cd.Cig);
        const Tap& t = taps[static_cast<size_t>(idx % nt)];
        const int g = co / cd.Cog;
        const int ci = g * cd.Cig + cig;
        const int zlo = std::max(0, -t.oz), zhi = std::min(cd.D, cd.D - t.oz);
        const int ylo = std::max(0, -t.oy), yhi = std::min(cd.H, cd.H - t.oy);
        const int xlo = std::max(0, -t.ox), xhi = std::min(cd.W, cd.W - t.ox);
        double acc = 0.0;
        for (int b = 0; b < cd.B; ++b)
            for (int z = zlo; z < zhi; ++z)
                for (int y = ylo; y < yhi; ++y) {
                    const double* gorow = gout.data() + gout.idx(b, co, z, y, 0);
                    const double* xrow = x.data() + x.idx(b, ci, z + t.oz, y + t.oy, t.ox);
                    double s = 0.0;
                    for (int xq = xlo; xq < xhi; ++xq) s += gorow[xq] * xrow[xq];
                    acc += s;
                }
        gw.v[static_cast<size_t>((static_cast<int64_t>(co) * cd.Cig + cig) * k3 + t.widx)] += acc;
    }
}

// ---- reflect-padded kernels (table-mapped indices) ---------------------------

void conv_forward_reflect(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& out,
                          const ConvDims& cd, const std::vector<Tap>& taps) {
    const auto rz = reflect_table(cd.D, cd.pad);
    const auto ry = reflect_table(cd.H, cd.pad);
    const auto rx = reflect_table(cd.W, cd.pad);
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int bco = 0; bco < cd.B * cd.Co; ++bco)
        for (int z = 0; z < cd.D; ++z) {
            const int b = bco / cd.Co, co = bco % cd.Co;
            const int g = co / cd.Cog;
            const double bval = bias ? bias->v[static_cast<size_t>(co)] : 0.0;
            for (int y = 0; y < cd.H; ++y)
                for (int xq = 0; xq < cd.W; ++xq) {
                    double acc = bval;
                    for (int cig = 0; cig < cd.Cig; ++cig) {
                        const int ci = g * cd.Cig + cig;
                        const double* xch = x.data() + x.idx(b, ci, 0, 0, 0);
                        const double* wk = w.data() + (static_cast<int64_t>(co) * cd.Cig + cig) * k3;
                        for (const Tap& t : taps) {
                            const int iz = rz[static_cast<size_t>(z + t.oz + cd.pad)];
                            const int iy = ry[static_cast<size_t>(y + t.oy + cd.pad)];
                            const int ix = rx[static_cast<size_t>(xq + t.ox + cd.pad)];
                            acc += wk[t.widx] * xch[(static_cast<int64_t>(iz) * cd.H + iy) * cd.W + ix];
                        }
                    }
                    out.v[static_cast<size_t>(out.idx(b, co, z, y, xq))] = acc;
                }
        }
}

void conv_backward_input_reflect(const Tensor& gout, const Tensor& w, Tensor& gin,
                                 const ConvDims& cd, const std::vector<Tap>& taps) {
    const auto rz = reflect_table(cd.D, cd.pad);
    const auto ry = reflect_table(cd.H, cd.pad);
    const auto rx = reflect_table(cd.W, cd.pad);
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
    const int PD = cd.D + 2 * cd.pad, PH = cd.H + 2 * cd.pad, PW = cd.W + 2 * cd.pad;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bci = 0; bci < cd.B * cd.Ci; ++bci) {
        const int b = bci / cd.Ci, ci = bci % cd.Ci;
        const int g = ci / cd.Cig, cig = ci % cd.Cig;
        // gradient over the padded array (pure gather), then fold by reflection
        std::vector<double> gpad(static_cast<size_t>(PD) * PH * PW, 0.0);
        for (int jz = 0; jz < PD; ++jz)
            for (int jy = 0; jy < PH; ++jy)
                for (int jx = 0; jx < PW; ++jx) {
                    double acc = 0.0;
                    for (const Tap& t : taps) {
                        const int z = jz - cd.pad - t.oz, y = jy - cd.pad - t.oy, xq = jx - cd.pad - t.ox;
                        if (z < 0 || z >= cd.D || y < 0 || y >= cd.H || xq < 0 || xq >= cd.W) continue;
                        for (int coq = 0; coq < cd.Cog; ++coq) {
                            const int co = g * cd.Cog + coq;
                            acc += w.v[static_cast<size_t>((static_cast<int64_t>(co) * cd.Cig + cig) * k3 +
                                                           t.widx)] *
                                   gout.v[static_cast<size_t>(gout.idx(b, co, z, y, xq))];
                        }
                    }
                    gpad[(static_cast<size_t>(jz) * PH + jy) * PW + jx] = acc;
                }
        for (int jz = 0; jz < PD; ++jz)
            for (int jy = 0; jy < PH; ++jy)
                for (int jx = 0; jx < PW; ++jx)
                    gin.v[static_cast<size_t>(
                        gin.idx(b, ci, rz[static_cast<size_t>(jz)], ry[static_cast<size_t>(jy)],
                                rx[static_cast<size_t>(jx)]))] +=
                        gpad[(static_cast<size_t>(jz) * PH + jy) * PW + jx];
    }
}

void conv_backward_weight_reflect(const Tensor& gout, const Tensor& x, Tensor& gw,
                                  const ConvDims& cd, const std::vector<Tap>& taps) {
    const auto rz = reflect_table(cd.D, cd.pad);
    const auto ry = reflect_table(cd.H, cd.pad);
    const auto rx = reflect_table(cd.W, cd.pad);
    const int64_t k3 = static_cast<int64_t>(cd.k) * cd.k * cd.k;
    const int64_t nt = static_cast<int64_t>(taps.size());
    const int64_t total = static_cast<int64_t>(cd.Co) * cd.Cig * nt;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t idx = 0; idx < total; ++idx) {
        const int co = static_cast<int>(idx / (cd.Cig * nt));
        const int cig = static_cast<int>((idx / nt) % cd.Cig);
        const Tap& t = taps[static_cast<size_t>(idx % nt)];
        const int g = co / cd.Cog;
        const int ci = g * cd.Cig + cig;
        double acc = 0.0;
        for (int b = 0; b < cd.B; ++b) {
            const double* xch = x.data() + x.idx(b, ci, 0, 0, 0);
            for (int z = 0; z < cd.D; ++z)
                for (int y = 0; y < cd.H; ++y) {
                    const double* gorow = gout.data() + gout.idx(b, co, z, y, 0);
                    const int iz = rz[static_cast<size_t>(z + t.oz + cd.pad)];
                    const int iy = ry[static_cast<size_t>(y + t.oy + cd.pad)];
                    double s = 0.0;
                    for (int xq = 0; xq < cd.W; ++xq)
                        s += gorow[xq] *
                             xch[(static_cast<int64_t>(iz) * cd.H + iy) * cd.W +
                                 rx[static_cast<size_t>(xq + t.ox + cd.pad)]];
                    acc += s;
                }
        }
        gw.v[static_cast<size_t>((static_cast<int64_t>(co) * cd.Cig + cig) * k3 + t.widx)] += acc;
    }
}

void conv_backward_bias(const Tensor& gout, Tensor& gb, const ConvDims& cd) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int co = 0; co < cd.Co; ++co) {
        double acc = 0.0;
        for (int b = 0; b < cd.B; ++b) {
            const double* p = gout.data() + gout.idx(b, co, 0, 0, 0);
            const int64_t n = static_cast<int64_t>(cd.D) * cd.H * cd.W;
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += p[i];
            acc += s;
        }
        gb.v[static_cast<size_t>(co)] += acc;
    }
}

} // namespace

Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvOpts& opt) {
    const ConvDims cd = check_conv(x.shape(), w.shape(), bias, opt);
    const auto taps = active_taps(cd.k, opt.dilation, opt.mask.get());
    Tensor out({cd.B, cd.Co, cd.D, cd.H, cd.W});
    const Tensor* bt = bias.defined() ? &bias.val() : nullptr;
    if (opt.pad == PadMode::zero)
        conv_forward_zero(x.val(), w.val(), bt, out, cd, taps);
    else
        conv_forward_reflect(x.val(), w.val(), bt, out, cd, taps);

    std::vector<std::shared_ptr<Node>> parents = {x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    const PadMode pad = opt.pad;
    auto xb = x.node();  // keep values alive for the closure
    auto wb = w.node();
    auto bb = bias.defined() ? bias.node() : nullptr;
    return make_node(std::move(out), std::move(parents), [cd, taps, pad, xb, wb, bb](Node& self) {
        const Tensor& g = self.grad;
        if (xb->requires_grad) {
            Tensor& gx = xb->grad_buf();
            if (pad == PadMode::zero)
                conv_backward_input_zero(g, wb->val, gx, cd, taps);
            else
                conv_backward_input_reflect(g, wb->val, gx, cd, taps);
        }
        if (wb->requires_grad) {
            Tensor& gw = wb->grad_buf();
            if (pad == PadMode::zero)
                conv_backward_weight_zero(g, xb->val, gw, cd, taps);
            else
                conv_backward_weight_reflect(g, xb->val, gw, cd, taps);
        }
        if (bb && bb->requires_grad) conv_backward_bias(g, bb->grad_buf(), cd);
    });
}

} // namespace cryobsn::ag
