#include "cryobsn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cryobsn/rng.hpp"

namespace cryobsn::ag {

GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Var>& leaves,
                           uint64_t seed, int samples_per_leaf, double fd_step) {
    for (auto& l : leaves) l.zero_grad();
    Var out = f();
    backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves)
        analytic.push_back(l.has_grad() ? l.grad() : Tensor::zeros(l.shape()));

    Rng rng(seed);
    GradCheckResult res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        const int64_t n = leaves[li].val().numel();
        std::vector<int64_t> coords;
        if (n <= samples_per_leaf) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int s = 0; s < samples_per_leaf; ++s)
                coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        Tensor& vals = leaves[li].mutable_val();
        for (int64_t ci : coords) {
            const double v0 = vals.v[static_cast<size_t>(ci)];
            double fp, fm;
            {
                NoGradGuard ng;
                vals.v[static_cast<size_t>(ci)] = v0 + fd_step;
                fp = f().val().v[0];
                vals.v[static_cast<size_t>(ci)] = v0 - fd_step;
                fm = f().val().v[0];
                vals.v[static_cast<size_t>(ci)] = v0;
            }
            const double numeric = (fp - fm) / (2.0 * fd_step);
            const double a = analytic[li].v[static_cast<size_t>(ci)];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                std::ostringstream os;
                os << "leaf " << li << " coord " << ci << " analytic " << a << " numeric " << numeric;
                res.worst = os.str();
            }
        }
    }
    return res;
}

} // namespace cryobsn::ag
