#include "cryobsn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cryobsn/filters.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn {

namespace {

void check_dims(const Volume& a, const Volume& b, const char* op) {
    if (!a.same_dims(b)) throw std::runtime_error(std::string(op) + ": volume dims differ");
}

double dynamic_range(const Volume& a) {
    float lo = a.data[0], hi = a.data[0];
    for (float f : a.data) {
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    const double r = static_cast<double>(hi) - lo;
    return r > 0.0 ? r : 1.0;
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

} // namespace

PsnrResult psnr(const Volume& a, const Volume& b, double peak) {
    check_dims(a, b, "psnr");
    if (peak <= 0.0) peak = dynamic_range(a);
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data[static_cast<size_t>(i)]) - b.data[static_cast<size_t>(i)];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    PsnrResult r;
    if (mse == 0.0) {
        r.db = 100.0;
        r.capped = true;
    } else {
        r.db = 10.0 * std::log10(peak * peak / mse);
    }
    return r;
}

double ssim3d(const Volume& a, const Volume& b, int window, double k1, double k2, double peak) {
    check_dims(a, b, "ssim3d");
    if (window < 1 || window % 2 == 0) throw std::runtime_error("ssim3d: window must be odd");
    if (peak <= 0.0) peak = dynamic_range(a);
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);
    const int radius = window / 2;
    // Gaussian window, sigma 1.5, separable weighted local moments
    std::vector<double> wk(static_cast<size_t>(window));
    double wsum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        wk[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (1.5 * 1.5));
        wsum += wk[static_cast<size_t>(i + radius)];
    }
    for (double& v : wk) v /= wsum;

    const int D = a.d, H = a.h, W = a.w;
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<double> fa(n), fb(n), faa(n), fbb(n), fab(n);
    for (size_t i = 0; i < n; ++i) {
        fa[i] = a.data[i];
        fb[i] = b.data[i];
        faa[i] = fa[i] * fa[i];
        fbb[i] = fb[i] * fb[i];
        fab[i] = fa[i] * fb[i];
    }
    auto smooth = [&](std::vector<double>& f) {
        std::vector<double> tmp(n);
        for (int axis = 0; axis < 3; ++axis) {
            const int dim = axis == 0 ? D : axis == 1 ? H : W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int z = 0; z < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double acc = 0.0;
                        for (int t = -radius; t <= radius; ++t) {
                            int zz = z, yy = y, xx = x;
                            if (axis == 0)
                                zz = reflect_index(z + t, dim);
                            else if (axis == 1)
                                yy = reflect_index(y + t, dim);
                            else
                                xx = reflect_index(x + t, dim);
                            acc += wk[static_cast<size_t>(t + radius)] *
                                   f[(static_cast<size_t>(zz) * H + yy) * W + xx];
                        }
                        tmp[(static_cast<size_t>(z) * H + y) * W + x] = acc;
                    }
            f.swap(tmp);
        }
    };
    smooth(fa);
    smooth(fb);
    smooth(faa);
    smooth(fbb);
    smooth(fab);

    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double mu_a = fa[i], mu_b = fb[i];
        const double var_a = faa[i] - mu_a * mu_a;
        const double var_b = fbb[i] - mu_b * mu_b;
        const double cov = fab[i] - mu_a * mu_b;
        const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
        const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    return total / static_cast<double>(n);
}

FscCurve fsc(const Volume& a, const Volume& b, int n_shells) {
    check_dims(a, b, "fsc");
    if (n_shells < 1) throw std::runtime_error("fsc: n_shells must be >= 1");
    const Spectrum A = dft3d(a), B = dft3d(b);
    const double shell_width = 0.5 / n_shells;
    std::vector<double> cross(static_cast<size_t>(n_shells), 0.0);
    std::vector<double> pa(static_cast<size_t>(n_shells), 0.0), pb(static_cast<size_t>(n_shells), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(n_shells), 0);
    for (int z = 0; z < A.d; ++z)
        for (int y = 0; y < A.h; ++y)
            for (int x = 0; x < A.w; ++x) {
                const double fz = static_cast<double>(centered_freq(z, A.d)) / A.d;
                const double fy = static_cast<double>(centered_freq(y, A.h)) / A.h;
                const double fx = static_cast<double>(centered_freq(x, A.w)) / A.w;
                const double f = std::sqrt(fz * fz + fy * fy + fx * fx);
                if (f > 0.5) continue; // outside the Nyquist sphere
                int s = static_cast<int>(f / shell_width);
                if (s >= n_shells) s = n_shells - 1;
                const auto va = A.at(z, y, x), vb = B.at(z, y, x);
                cross[static_cast<size_t>(s)] += va.real() * vb.real() + va.imag() * vb.imag();
                pa[static_cast<size_t>(s)] += std::norm(va);
                pb[static_cast<size_t>(s)] += std::norm(vb);
                counts[static_cast<size_t>(s)] += 1;
            }
    FscCurve out;
    for (int s = 0; s < n_shells; ++s) {
        if (counts[static_cast<size_t>(s)] == 0) {
            out.dropped_shells += 1;
            continue;
        }
        const double denom = std::sqrt(pa[static_cast<size_t>(s)] * pb[static_cast<size_t>(s)]);
        out.freq.push_back((s + 0.5) * shell_width);
        out.corr.push_back(denom > 0.0 ? cross[static_cast<size_t>(s)] / denom : 0.0);
        out.counts.push_back(counts[static_cast<size_t>(s)]);
    }
    return out;
}

FscResolution fsc_resolution(const FscCurve& curve, double spacing, double threshold) {
    FscResolution r;
    if (curve.corr.empty()) throw std::runtime_error("fsc_resolution: empty curve");
    for (size_t s = 0; s < curve.corr.size(); ++s) {
        if (curve.corr[s] < threshold) {
            if (s == 0) {
                r.f_cross = curve.freq[0];
            } else {
                const double c0 = curve.corr[s - 1], c1 = curve.corr[s];
                const double f0 = curve.freq[s - 1], f1 = curve.freq[s];
                const double t = (c0 - threshold) / (c0 - c1);
                r.f_cross = f0 + t * (f1 - f0);
            }
            r.angstrom = spacing / r.f_cross;
            return r;
        }
    }
    r.nyquist_limited = true;
    r.f_cross = 0.5;
    r.angstrom = spacing / 0.5;
    return r;
}

std::string metrics_csv_header() { return "dataset,sigma,method,psnr_db,ssim,fsc_res_A"; }

std::string metrics_csv_row(const std::string& dataset, const std::string& sigma,
                            const std::string& method, const PsnrResult& p, double ssim,
                            const FscResolution* fsc_res) {
    std::ostringstream os;
    os << dataset << "," << sigma << "," << method << ",";
    os.precision(6);
    os << std::fixed << p.db << (p.capped ? "(capped)" : "") << "," << ssim << ",";
    if (fsc_res) os << fsc_res->angstrom << (fsc_res->nyquist_limited ? "(nyquist)" : "");
    return os.str();
}

} // namespace cryobsn
