#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace cryobsn {

// Rank-5 shape: batch, channel, depth, height, width.
struct Shape5 {
    int b = 0, c = 0, d = 0, h = 0, w = 0;

    int64_t numel() const {
        return static_cast<int64_t>(b) * c * d * h * w;
    }
    int64_t spatial() const { return static_cast<int64_t>(d) * h * w; }
    bool operator==(const Shape5& o) const = default;
    std::string str() const;
};

// Dense rank-5 tensor of doubles. The network engine computes in 64-bit
// throughout; file formats convert to/from f32 at the boundary.
struct Tensor {
    Shape5 shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape5 s) : shape(s), v(static_cast<size_t>(s.numel()), 0.0) {}

    static Tensor zeros(Shape5 s) { return Tensor(s); }
    static Tensor full(Shape5 s, double value) {
        Tensor t(s);
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    int64_t idx(int b, int c, int d, int h, int w) const {
        return (((static_cast<int64_t>(b) * shape.c + c) * shape.d + d) * shape.h + h) * shape.w + w;
    }
    double& at(int b, int c, int d, int h, int w) { return v[static_cast<size_t>(idx(b, c, d, h, w))]; }
    double at(int b, int c, int d, int h, int w) const { return v[static_cast<size_t>(idx(b, c, d, h, w))]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
    int64_t numel() const { return shape.numel(); }

    bool all_finite() const;
};

// Fixed-chunk deterministic sum: result is independent of thread count
// because partials are formed over fixed index ranges and combined in order.
double det_sum(const double* x, int64_t n);

} // namespace cryobsn
