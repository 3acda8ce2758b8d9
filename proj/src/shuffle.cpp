#include "cryobsn/shuffle.hpp"

#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn {

namespace {

void check_positive(int v) {
    if (v < 1) throw std::runtime_error("volume shuffle: factor must be >= 1");
}

} // namespace

Tensor volume_unshuffle(const Tensor& x, int v) {
    check_positive(v);
    const Shape5 s = x.shape;
    const char* axis = s.d % v != 0 ? "depth" : s.h % v != 0 ? "height" : s.w % v != 0 ? "width" : nullptr;
    if (axis)
        throw std::runtime_error(std::string("volume_unshuffle: ") + axis +
                                 " not divisible by v=" + std::to_string(v));
    if (v == 1) return x;
    const int v3 = v * v * v;
    Tensor out({s.b, s.c * v3, s.d / v, s.h / v, s.w / v});
    const Shape5 o = out.shape;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < o.b; ++b)
        for (int c = 0; c < o.c; ++c) {
            const int ci = c / v3;
            const int blk = c % v3;
            const int dd = blk / (v * v), dh = (blk / v) % v, dw = blk % v;
            for (int d = 0; d < o.d; ++d)
                for (int h = 0; h < o.h; ++h) {
                    const double* src =
                        x.data() + x.idx(b, ci, d * v + dd, h * v + dh, dw);
                    double* dst = out.data() + out.idx(b, c, d, h, 0);
                    for (int w = 0; w < o.w; ++w) dst[w] = src[static_cast<int64_t>(w) * v];
                }
        }
    return out;
}

Tensor volume_shuffle(const Tensor& x, int v) {
    check_positive(v);
    const Shape5 s = x.shape;
    const int v3 = v * v * v;
    if (s.c % v3 != 0)
        throw std::runtime_error("volume_shuffle: channels (" + std::to_string(s.c) +
                                 ") not divisible by v^3=" + std::to_string(v3));
    if (v == 1) return x;
    Tensor out({s.b, s.c / v3, s.d * v, s.h * v, s.w * v});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c) {
            const int co = c / v3;
            const int blk = c % v3;
            const int dd = blk / (v * v), dh = (blk / v) % v, dw = blk % v;
            for (int d = 0; d < s.d; ++d)
                for (int h = 0; h < s.h; ++h) {
                    const double* src = x.data() + x.idx(b, c, d, h, 0);
                    double* dst = out.data() + out.idx(b, co, d * v + dd, h * v + dh, dw);
                    for (int w = 0; w < s.w; ++w) dst[static_cast<int64_t>(w) * v] = src[w];
                }
        }
    return out;
}

Tensor channel_transpose(const Tensor& x, int rows, int cols) {
    const Shape5 s = x.shape;
    if (rows * cols != s.c)
        throw std::runtime_error("channel_transpose: rows*cols != channels");
    if (rows == 1 || cols == 1) return x;
    Tensor out(s);
    const int64_t plane = s.spatial();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c) {
            const int r = c / cols, q = c % cols;
            const double* src = x.data() + (static_cast<int64_t>(b) * s.c + c) * plane;
            double* dst = out.data() + (static_cast<int64_t>(b) * s.c + (q * rows + r)) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
        }
    return out;
}

} // namespace cryobsn
