#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cryobsn/tensor.hpp"

namespace cryobsn {

// Dense 3D scalar grid, row-major (d,h,w), f32 storage, voxel spacing in
// Angstrom per voxel. The unit of file I/O, simulation and evaluation.
struct Volume {
    int d = 0, h = 0, w = 0;
    float spacing = 1.0f;
    std::vector<float> data;

    Volume() = default;
    Volume(int d_, int h_, int w_, float spacing_ = 1.0f)
        : d(d_), h(h_), w(w_), spacing(spacing_),
          data(static_cast<size_t>(d_) * h_ * w_, 0.0f) {}

    int64_t numel() const { return static_cast<int64_t>(d) * h * w; }
    int64_t idx(int z, int y, int x) const {
        return (static_cast<int64_t>(z) * h + y) * w + x;
    }
    float& at(int z, int y, int x) { return data[static_cast<size_t>(idx(z, y, x))]; }
    float at(int z, int y, int x) const { return data[static_cast<size_t>(idx(z, y, x))]; }

    bool same_dims(const Volume& o) const { return d == o.d && h == o.h && w == o.w; }
    void validate(const std::string& context) const; // throws on bad dims / non-finite values
};

// ---- file I/O ----------------------------------------------------------
// CVOL (little-endian): magic "CVOL", version u32=1, D u32, H u32, W u32,
// spacing f32, then D*H*W f32 values in (d,h,w) row-major order.
Volume read_cvol(const std::string& path);
void write_cvol(const Volume& v, const std::string& path);

// MRC2014, read-only, mode 2 (f32) only. Dims from NX/NY/NZ (x fastest,
// z = sections -> Volume d). Spacing = CELLA.x/NX when present, else 1.0.
Volume read_mrc(const std::string& path);

// ---- normalization ------------------------------------------------------
enum class NormMethod { percentile, zscore };

// x_norm = (x - offset) / scale, clamped to [0,1] in percentile mode.
struct NormalizationRecord {
    NormMethod method = NormMethod::percentile;
    double offset = 0.0;
    double scale = 1.0;
};

Volume normalize(const Volume& v, NormMethod method, NormalizationRecord& rec);
Volume denormalize(const Volume& v, const NormalizationRecord& rec);

// ---- overlapping patches ------------------------------------------------
// Cube patches of edge patch_size; origins step by stride and the last
// patch per axis is shifted inward to end at the boundary. Stitching
// blends with a separable raised-cosine taper renormalized per voxel.
struct PatchGrid {
    int patch_size = 0;
    int stride = 0;
    int dims[3] = {0, 0, 0};
    std::vector<std::array<int, 3>> origins;
    std::vector<double> blend_weights; // patch_size^3 taper, shared by all patches
};

PatchGrid plan_patches(int d, int h, int w, int patch_size, int stride);

// Copies one patch into a [1,1,P,P,P] tensor.
Tensor extract_patch(const Volume& v, const std::array<int, 3>& origin, int patch_size);
std::vector<Tensor> extract_patches(const Volume& v, const PatchGrid& grid);

Volume stitch_patches(const std::vector<Tensor>& patches, const PatchGrid& grid);

} // namespace cryobsn
