#pragma once

#include "cryobsn/autograd.hpp"

namespace cryobsn {

struct LossWeights {
    double rec = 0.8;
    double guide = 0.5;
    double edge = 0.05;
    double tv = 0.01;
};

// All losses use mean reduction so the default weights are patch-size
// independent. pred is [B,1,D,H,W]; targets are constants of the same shape.

ag::Var loss_rec(const ag::Var& pred, const ag::Var& noisy);
ag::Var loss_guide(const ag::Var& pred, const ag::Var& gauss_target);
ag::Var loss_edge(const ag::Var& pred, const ag::Var& bilat_target);
ag::Var loss_tv(const ag::Var& pred);

// Differentiable edge magnitude map K built from the seven fixed direction
// kernels (reflect boundary), shared with filters::edge_enhancer.
ag::Var edge_map(const ag::Var& x);

struct LossTerms {
    ag::Var total;
    double rec = 0.0, guide = 0.0, edge = 0.0, tv = 0.0;
};

LossTerms loss_total(const ag::Var& pred, const ag::Var& noisy, const ag::Var& gauss_target,
                     const ag::Var& bilat_target, const LossWeights& w);

} // namespace cryobsn
