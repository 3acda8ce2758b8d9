#pragma once

#include <array>
#include <complex>
#include <vector>

#include "cryobsn/volume.hpp"

namespace cryobsn {

// Separable Gaussian smoothing, truncated at radius ceil(3*sigma), kernel
// normalized to sum 1, mirror (reflect) boundary.
Volume gaussian3d(const Volume& v, double sigma);

// Brute-force windowed bilateral filter, window radius ceil(2*sigma_s),
// Gaussian range kernel; window clipped at the volume boundary.
Volume bilateral3d(const Volume& v, double sigma_s, double sigma_r);

// Multi-directional edge magnitude: sqrt of the sum of squared responses of
// the seven direction kernels (3 axes + 4 body diagonals), reflect boundary.
Volume edge_enhancer(const Volume& v);

// The seven 3x3x3 zero-sum direction kernels shared by edge_enhancer and the
// edge loss, flattened (z,y,x) raster order.
const std::array<std::array<double, 27>, 7>& edge_kernels();

// ---- discrete Fourier transform (naive separable; desk-scale dims) -------
struct Spectrum {
    int d = 0, h = 0, w = 0;
    float spacing = 1.0f;
    std::vector<std::complex<double>> c;

    int64_t idx(int z, int y, int x) const { return (static_cast<int64_t>(z) * h + y) * w + x; }
    std::complex<double>& at(int z, int y, int x) { return c[static_cast<size_t>(idx(z, y, x))]; }
    const std::complex<double>& at(int z, int y, int x) const { return c[static_cast<size_t>(idx(z, y, x))]; }
};

Spectrum dft3d(const Volume& v);
Volume idft3d(const Spectrum& s); // returns the real part

// Signed centered frequency index for bin i of an n-point transform.
inline int centered_freq(int i, int n) { return i <= n / 2 ? i : i - n; }

// Zero all coefficients with normalized |f| > cutoff (cycles/voxel).
Volume lowpass3d(const Volume& v, double cutoff);

} // namespace cryobsn
