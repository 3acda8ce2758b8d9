#pragma once

#include <cstdint>
#include <utility>

#include "cryobsn/volume.hpp"

namespace cryobsn {

// Random geometric phantom: solid spheres, hollow shells, rods (cylinders),
// anti-aliased by 2x supersampling, values in [0,1].
struct PhantomSpec {
    int spheres = 6;
    int shells = 3;
    int rods = 4;
    double min_radius = 4.0;
    double max_radius = 10.0;
    double min_intensity = 0.4;
    double max_intensity = 1.0;
};

Volume make_phantom(int d, int h, int w, uint64_t seed, const PhantomSpec& spec);

Volume add_awgn(const Volume& v, double sigma, uint64_t seed);

// Gain-parameterized shot noise: noisy = lambda * Poisson(clip(v,0)/lambda),
// variance ~ lambda * v.
Volume add_poisson(const Volume& v, double lambda, uint64_t seed);

// Convex combination of the AWGN and Poisson renderings, weights normalized
// to sum 1. Component seeds are derived deterministically from `seed`.
Volume add_mixture(const Volume& v, double sigma, double lambda, double w_awgn, double w_poisson,
                   uint64_t seed);

enum class NoiseKind { awgn, poisson, mixture };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::awgn;
    double sigma = 0.2;
    double lambda = 0.02;
    double w_awgn = 0.5;
    double w_poisson = 0.5;
};

Volume add_noise(const Volume& v, const NoiseSpec& spec, uint64_t seed);

// Zeroes Fourier coefficients whose (f_x, f_z) direction falls outside the
// tilt range +-theta_max about the beam axis (z = Volume d, tilt axis y),
// re-enforces Hermitian symmetry and returns the real inverse transform.
Volume apply_missing_wedge(const Volume& v, double theta_max_deg);

struct Halves {
    Volume a, b;
    bool independent = false; // false when the two seeds coincide (invalid for FSC)
};

Halves make_halves(const Volume& clean, const NoiseSpec& spec, uint64_t seed_a, uint64_t seed_b);

} // namespace cryobsn
