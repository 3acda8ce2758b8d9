#include "cryobsn/tensor.hpp"

#include <cmath>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryobsn {

std::string Shape5::str() const {
    std::ostringstream os;
    os << "[" << b << "," << c << "," << d << "," << h << "," << w << "]";
    return os.str();
}

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double det_sum(const double* x, int64_t n) {
    constexpr int64_t kChunk = 4096;
    const int64_t nchunks = (n + kChunk - 1) / kChunk;
    if (nchunks <= 1) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t c = 0; c < nchunks; ++c) {
        const int64_t lo = c * kChunk;
        const int64_t hi = std::min(n, lo + kChunk);
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) s += x[i];
        partial[static_cast<size_t>(c)] = s;
    }
    double s = 0.0;
    for (double p : partial) s += p;
    return s;
}

} // namespace cryobsn
