#include "cryobsn/losses.hpp"

#include <stdexcept>

#include "cryobsn/filters.hpp"

namespace cryobsn {

using ag::Var;

ag::Var loss_rec(const Var& pred, const Var& noisy) { return ag::mse(pred, noisy); }

ag::Var loss_guide(const Var& pred, const Var& gauss_target) { return ag::mse(pred, gauss_target); }

ag::Var edge_map(const Var& x) {
    if (x.shape().c != 1) throw std::runtime_error("edge_map: expects a single-channel tensor");
    static const Var weights = [] {
        const auto& ks = edge_kernels();
        Tensor w({7, 1, 3, 3, 3});
        for (int f = 0; f < 7; ++f)
            for (int i = 0; i < 27; ++i)
                w.v[static_cast<size_t>(f * 27 + i)] = ks[static_cast<size_t>(f)][static_cast<size_t>(i)];
        return Var::leaf(std::move(w), false);
    }();
    ag::ConvOpts opt;
    opt.pad = ag::PadMode::reflect;
    Var r = ag::conv3d(x, weights, Var(), opt); // [B,7,D,H,W]
    Var sq = ag::mul(r, r);
    Var ssum = ag::channel_sum(sq);
    return ag::sqrt_eps(ssum, 1e-12);
}

ag::Var loss_edge(const Var& pred, const Var& bilat_target) {
    return ag::mse(edge_map(pred), edge_map(bilat_target));
}

ag::Var loss_tv(const Var& pred) { return ag::tv_smooth(pred, 1e-6); }

LossTerms loss_total(const Var& pred, const Var& noisy, const Var& gauss_target,
                     const Var& bilat_target, const LossWeights& w) {
    LossTerms t;
    Var rec = loss_rec(pred, noisy);
    Var guide = loss_guide(pred, gauss_target);
    Var edge = loss_edge(pred, bilat_target);
    Var tv = loss_tv(pred);
    t.rec = rec.val().v[0];
    t.guide = guide.val().v[0];
    t.edge = edge.val().v[0];
    t.tv = tv.val().v[0];
    t.total = ag::add(ag::add(ag::scale(rec, w.rec), ag::scale(guide, w.guide)),
                      ag::add(ag::scale(edge, w.edge), ag::scale(tv, w.tv)));
    return t;
}

} // namespace cryobsn
