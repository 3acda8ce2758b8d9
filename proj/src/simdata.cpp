#include "cryobsn/simdata.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cryobsn/filters.hpp"
#include "cryobsn/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn {

namespace {

struct Sphere {
    double cz, cy, cx, r, r_inner, intensity; // r_inner > 0 makes it a shell
};

struct Rod {
    double cz, cy, cx;     // center
    double az, ay, ax;     // unit axis
    double radius, halflen, intensity;
};

struct Objects {
    std::vector<Sphere> spheres;
    std::vector<Rod> rods;
};

Objects generate_objects(int d, int h, int w, uint64_t seed, const PhantomSpec& spec) {
    Rng rng(seed);
    Objects obj;
    auto center = [&](double margin) {
        return std::array<double, 3>{rng.uniform(margin, d - margin), rng.uniform(margin, h - margin),
                                     rng.uniform(margin, w - margin)};
    };
    for (int i = 0; i < spec.spheres; ++i) {
        const double r = rng.uniform(spec.min_radius, spec.max_radius);
        const auto c = center(r);
        obj.spheres.push_back({c[0], c[1], c[2], r, 0.0,
                               rng.uniform(spec.min_intensity, spec.max_intensity)});
    }
    for (int i = 0; i < spec.shells; ++i) {
        const double r = rng.uniform(spec.min_radius, spec.max_radius);
        const auto c = center(r);
        obj.spheres.push_back({c[0], c[1], c[2], r, 0.65 * r,
                               rng.uniform(spec.min_intensity, spec.max_intensity)});
    }
    const double max_half = 0.35 * std::min({d, h, w});
    for (int i = 0; i < spec.rods; ++i) {
        Rod rod;
        const auto c = center(spec.min_radius);
        rod.cz = c[0];
        rod.cy = c[1];
        rod.cx = c[2];
        double az = rng.normal(), ay = rng.normal(), ax = rng.normal();
        const double norm = std::sqrt(az * az + ay * ay + ax * ax) + 1e-12;
        rod.az = az / norm;
        rod.ay = ay / norm;
        rod.ax = ax / norm;
        rod.radius = rng.uniform(1.5, 3.0);
        rod.halflen = rng.uniform(0.5 * max_half, max_half);
        rod.intensity = rng.uniform(spec.min_intensity, spec.max_intensity);
        obj.rods.push_back(rod);
    }
    return obj;
}

double sample_objects(const Objects& obj, double z, double y, double x) {
    double best = 0.0;
    for (const auto& s : obj.spheres) {
        const double dz = z - s.cz, dy = y - s.cy, dx = x - s.cx;
        const double dist2 = dz * dz + dy * dy + dx * dx;
        if (dist2 <= s.r * s.r && dist2 >= s.r_inner * s.r_inner) best = std::max(best, s.intensity);
    }
    for (const auto& r : obj.rods) {
        const double dz = z - r.cz, dy = y - r.cy, dx = x - r.cx;
        const double t = dz * r.az + dy * r.ay + dx * r.ax;
        if (std::abs(t) > r.halflen) continue;
        const double pz = dz - t * r.az, py = dy - t * r.ay, px = dx - t * r.ax;
        if (pz * pz + py * py + px * px <= r.radius * r.radius) best = std::max(best, r.intensity);
    }
    return best;
}

} // namespace

Volume make_phantom(int d, int h, int w, uint64_t seed, const PhantomSpec& spec) {
    if (d <= 0 || h <= 0 || w <= 0) throw std::runtime_error("make_phantom: bad dims");
    const Objects obj = generate_objects(d, h, w, seed, spec);
    Volume v(d, h, w);
    // 2x supersampling: 8 sub-positions per voxel
    static const double off[2] = {-0.25, 0.25};
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (double oz : off)
                    for (double oy : off)
                        for (double ox : off)
                            acc += sample_objects(obj, z + 0.5 + oz, y + 0.5 + oy, x + 0.5 + ox);
                v.at(z, y, x) = static_cast<float>(acc / 8.0);
            }
    return v;
}

Volume add_awgn(const Volume& v, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw std::runtime_error("add_awgn: sigma must be >= 0");
    Volume out(v.d, v.h, v.w, v.spacing);
    if (sigma == 0.0) {
        out.data = v.data;
        return out;
    }
    Rng rng(seed);
    for (int64_t i = 0; i < v.numel(); ++i)
        out.data[static_cast<size_t>(i)] =
            static_cast<float>(v.data[static_cast<size_t>(i)] + sigma * rng.normal());
    return out;
}

Volume add_poisson(const Volume& v, double lambda, uint64_t seed) {
    if (!(lambda > 0.0)) throw std::runtime_error("add_poisson: lambda must be > 0");
    Volume out(v.d, v.h, v.w, v.spacing);
    Rng rng(seed);
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double x = std::max(0.0, static_cast<double>(v.data[static_cast<size_t>(i)]));
        out.data[static_cast<size_t>(i)] =
            static_cast<float>(lambda * static_cast<double>(rng.poisson(x / lambda)));
    }
    return out;
}

Volume add_mixture(const Volume& v, double sigma, double lambda, double w_awgn, double w_poisson,
                   uint64_t seed) {
    if (w_awgn < 0.0 || w_poisson < 0.0 || w_awgn + w_poisson <= 0.0)
        throw std::runtime_error("add_mixture: weights must be nonnegative and not both zero");
    const double wsum = w_awgn + w_poisson;
    const double wa = w_awgn / wsum, wp = w_poisson / wsum;
    const uint64_t seed_p = seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull;
    Volume out(v.d, v.h, v.w, v.spacing);
    if (wp == 0.0) return add_awgn(v, sigma, seed);
    if (wa == 0.0) return add_poisson(v, lambda, seed_p);
    const Volume ga = add_awgn(v, sigma, seed);
    const Volume po = add_poisson(v, lambda, seed_p);
    for (int64_t i = 0; i < v.numel(); ++i)
        out.data[static_cast<size_t>(i)] = static_cast<float>(
            wa * ga.data[static_cast<size_t>(i)] + wp * po.data[static_cast<size_t>(i)]);
    return out;
}

Volume add_noise(const Volume& v, const NoiseSpec& spec, uint64_t seed) {
    switch (spec.kind) {
        case NoiseKind::awgn:
            return add_awgn(v, spec.sigma, seed);
        case NoiseKind::poisson:
            return add_poisson(v, spec.lambda, seed);
        case NoiseKind::mixture:
            return add_mixture(v, spec.sigma, spec.lambda, spec.w_awgn, spec.w_poisson, seed);
    }
    throw std::runtime_error("add_noise: unknown noise kind");
}

Volume apply_missing_wedge(const Volume& v, double theta_max_deg) {
    if (!(theta_max_deg > 0.0) || theta_max_deg > 90.0)
        throw std::runtime_error("apply_missing_wedge: theta_max must be in (0, 90]");
    Spectrum s = dft3d(v);
    const double theta = theta_max_deg * 3.14159265358979323846 / 180.0;
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const double fz = std::abs(static_cast<double>(centered_freq(z, s.d)) / s.d);
                const double fx = std::abs(static_cast<double>(centered_freq(x, s.w)) / s.w);
                if (fz == 0.0 && fx == 0.0) continue;
                if (std::atan2(fx, fz) > theta) s.at(z, y, x) = {0.0, 0.0};
            }
    // the mask is even in f, but enforce Hermitian symmetry explicitly
    Spectrum sym = s;
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const int mz = (s.d - z) % s.d, my = (s.h - y) % s.h, mx = (s.w - x) % s.w;
                sym.at(z, y, x) = 0.5 * (s.at(z, y, x) + std::conj(s.at(mz, my, mx)));
            }
    return idft3d(sym);
}

Halves make_halves(const Volume& clean, const NoiseSpec& spec, uint64_t seed_a, uint64_t seed_b) {
    Halves h;
    h.a = add_noise(clean, spec, seed_a);
    h.b = add_noise(clean, spec, seed_b);
    h.independent = seed_a != seed_b;
    return h;
}

} // namespace cryobsn
