#include "cryobsn/filters.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn {

namespace {

constexpr double kPi = 3.14159265358979323846;

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

// one separable pass along the given axis (0=d, 1=h, 2=w), reflect boundary
void axis_convolve(const std::vector<double>& in, std::vector<double>& out, int D, int H, int W,
                   int axis, const std::vector<double>& kernel) {
    const int radius = static_cast<int>(kernel.size()) / 2;
    const int n = axis == 0 ? D : axis == 1 ? H : W;
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
                        zz = reflect_index(z + t, n);
                    else if (axis == 1)
                        yy = reflect_index(y + t, n);
                    else
                        xx = reflect_index(x + t, n);
                    acc += kernel[static_cast<size_t>(t + radius)] *
                           in[(static_cast<size_t>(zz) * H + yy) * W + xx];
                }
                out[(static_cast<size_t>(z) * H + y) * W + x] = acc;
            }
}

} // namespace

Volume gaussian3d(const Volume& v, double sigma) {
    if (!(sigma > 0.0)) throw std::runtime_error("gaussian3d: sigma must be > 0");
    const auto kernel = gaussian_kernel(sigma);
    std::vector<double> a(v.data.begin(), v.data.end()), b(a.size());
    axis_convolve(a, b, v.d, v.h, v.w, 0, kernel);
    axis_convolve(b, a, v.d, v.h, v.w, 1, kernel);
    axis_convolve(a, b, v.d, v.h, v.w, 2, kernel);
    Volume out(v.d, v.h, v.w, v.spacing);
    for (size_t i = 0; i < b.size(); ++i) out.data[i] = static_cast<float>(b[i]);
    return out;
}

Volume bilateral3d(const Volume& v, double sigma_s, double sigma_r) {
    if (!(sigma_s > 0.0) || !(sigma_r > 0.0))
        throw std::runtime_error("bilateral3d: sigma_s and sigma_r must be > 0");
    const int radius = static_cast<int>(std::ceil(2.0 * sigma_s));
    const int win = 2 * radius + 1;
    std::vector<double> spatial(static_cast<size_t>(win) * win * win);
    for (int dz = -radius; dz <= radius; ++dz)
        for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx)
                spatial[(static_cast<size_t>(dz + radius) * win + (dy + radius)) * win + (dx + radius)] =
                    std::exp(-0.5 * (dz * dz + dy * dy + dx * dx) / (sigma_s * sigma_s));
    Volume out(v.d, v.h, v.w, v.spacing);
    const double inv2r2 = 0.5 / (sigma_r * sigma_r);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int z = 0; z < v.d; ++z)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x) {
                const double center = v.at(z, y, x);
                double acc = 0.0, wsum = 0.0;
                const int zlo = std::max(0, z - radius), zhi = std::min(v.d - 1, z + radius);
                const int ylo = std::max(0, y - radius), yhi = std::min(v.h - 1, y + radius);
                const int xlo = std::max(0, x - radius), xhi = std::min(v.w - 1, x + radius);
                for (int zz = zlo; zz <= zhi; ++zz)
                    for (int yy = ylo; yy <= yhi; ++yy)
                        for (int xx = xlo; xx <= xhi; ++xx) {
                            const double val = v.at(zz, yy, xx);
                            const double dr = val - center;
                            const double wgt =
                                spatial[(static_cast<size_t>(zz - z + radius) * win + (yy - y + radius)) *
                                            win +
                                        (xx - x + radius)] *
                                std::exp(-dr * dr * inv2r2);
                            acc += wgt * val;
                            wsum += wgt;
                        }
                out.at(z, y, x) = static_cast<float>(acc / wsum);
            }
    return out;
}

const std::array<std::array<double, 27>, 7>& edge_kernels() {
    static const std::array<std::array<double, 27>, 7> kernels = [] {
        std::array<std::array<double, 27>, 7> ks{};
        const double smooth[3] = {1.0, 2.0, 1.0};
        const double deriv[3] = {-1.0, 0.0, 1.0};
        // three axis-aligned Sobel kernels
        for (int axis = 0; axis < 3; ++axis) {
            size_t i = 0;
            for (int z = 0; z < 3; ++z)
                for (int y = 0; y < 3; ++y)
                    for (int x = 0; x < 3; ++x, ++i) {
                        const double fz = axis == 0 ? deriv[z] : smooth[z];
                        const double fy = axis == 1 ? deriv[y] : smooth[y];
                        const double fx = axis == 2 ? deriv[x] : smooth[x];
                        ks[static_cast<size_t>(axis)][i] = fz * fy * fx;
                    }
        }
        // four body-diagonal direction kernels, scaled so a unit ramp along
        // the diagonal answers like the axis Sobels (response 32)
        const double diag[4][3] = {{1, 1, 1}, {1, 1, -1}, {1, -1, 1}, {1, -1, -1}};
        const double c = 32.0 / 18.0;
        for (int kd = 0; kd < 4; ++kd) {
            const double norm = std::sqrt(3.0);
            size_t i = 0;
            for (int z = -1; z <= 1; ++z)
                for (int y = -1; y <= 1; ++y)
                    for (int x = -1; x <= 1; ++x, ++i) {
                        const double dot = (z * diag[kd][0] + y * diag[kd][1] + x * diag[kd][2]) / norm;
                        ks[static_cast<size_t>(3 + kd)][i] = c * dot;
                    }
        }
        return ks;
    }();
    return kernels;
}

Volume edge_enhancer(const Volume& v) {
    const auto& ks = edge_kernels();
    Volume out(v.d, v.h, v.w, v.spacing);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int z = 0; z < v.d; ++z)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x) {
                double sumsq = 0.0;
                for (const auto& kernel : ks) {
                    double r = 0.0;
                    size_t i = 0;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx, ++i)
                                r += kernel[i] * v.at(reflect_index(z + dz, v.d), reflect_index(y + dy, v.h),
                                                      reflect_index(x + dx, v.w));
                    sumsq += r * r;
                }
                out.at(z, y, x) = static_cast<float>(std::sqrt(sumsq));
            }
    return out;
}

// ---- DFT -------------------------------------------------------------------

namespace {

// naive 1D transforms along each axis; twiddles precomputed per length
std::vector<std::complex<double>> twiddles(int n, bool inverse) {
    std::vector<std::complex<double>> tw(static_cast<size_t>(n) * n);
    const double sign = inverse ? 2.0 * kPi / n : -2.0 * kPi / n;
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j) {
            const double ang = sign * static_cast<double>((static_cast<int64_t>(k) * j) % n);
            tw[static_cast<size_t>(k) * n + j] = {std::cos(ang), std::sin(ang)};
        }
    return tw;
}

void axis_dft(std::vector<std::complex<double>>& data, int D, int H, int W, int axis, bool inverse) {
    const int n = axis == 0 ? D : axis == 1 ? H : W;
    const auto tw = twiddles(n, inverse);
    const int64_t nlines = static_cast<int64_t>(D) * H * W / n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t line = 0; line < nlines; ++line) {
        // decompose the line index into the two fixed axes
        int z = 0, y = 0, x = 0;
        if (axis == 0) {
            y = static_cast<int>(line / W);
            x = static_cast<int>(line % W);
        } else if (axis == 1) {
            z = static_cast<int>(line / W);
            x = static_cast<int>(line % W);
        } else {
            z = static_cast<int>(line / H);
            y = static_cast<int>(line % H);
        }
        const int64_t stride = axis == 0 ? static_cast<int64_t>(H) * W : axis == 1 ? W : 1;
        const int64_t base = axis == 0 ? static_cast<int64_t>(y) * W + x
                             : axis == 1 ? static_cast<int64_t>(z) * H * W + x
                                         : (static_cast<int64_t>(z) * H + y) * W;
        std::vector<std::complex<double>> buf(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = data[static_cast<size_t>(base + i * stride)];
        for (int k = 0; k < n; ++k) {
            std::complex<double> acc{0.0, 0.0};
            const std::complex<double>* twk = tw.data() + static_cast<size_t>(k) * n;
            for (int j = 0; j < n; ++j) acc += twk[j] * buf[static_cast<size_t>(j)];
            if (inverse) acc /= static_cast<double>(n);
            data[static_cast<size_t>(base + k * stride)] = acc;
        }
    }
}

} // namespace

Spectrum dft3d(const Volume& v) {
    Spectrum s;
    s.d = v.d;
    s.h = v.h;
    s.w = v.w;
    s.spacing = v.spacing;
    s.c.assign(static_cast<size_t>(v.numel()), {0.0, 0.0});
    for (int64_t i = 0; i < v.numel(); ++i) s.c[static_cast<size_t>(i)] = {v.data[static_cast<size_t>(i)], 0.0};
    axis_dft(s.c, s.d, s.h, s.w, 2, false);
    axis_dft(s.c, s.d, s.h, s.w, 1, false);
    axis_dft(s.c, s.d, s.h, s.w, 0, false);
    return s;
}

Volume idft3d(const Spectrum& sin) {
    Spectrum s = sin;
    axis_dft(s.c, s.d, s.h, s.w, 2, true);
    axis_dft(s.c, s.d, s.h, s.w, 1, true);
    axis_dft(s.c, s.d, s.h, s.w, 0, true);
    Volume v(s.d, s.h, s.w, s.spacing);
    for (size_t i = 0; i < s.c.size(); ++i) v.data[i] = static_cast<float>(s.c[i].real());
    return v;
}

Volume lowpass3d(const Volume& v, double cutoff) {
    if (!(cutoff > 0.0)) throw std::runtime_error("lowpass3d: cutoff must be > 0");
    Spectrum s = dft3d(v);
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const double fz = static_cast<double>(centered_freq(z, s.d)) / s.d;
                const double fy = static_cast<double>(centered_freq(y, s.h)) / s.h;
                const double fx = static_cast<double>(centered_freq(x, s.w)) / s.w;
                if (std::sqrt(fz * fz + fy * fy + fx * fx) > cutoff) s.at(z, y, x) = {0.0, 0.0};
            }
    return idft3d(s);
}

} // namespace cryobsn
