#pragma once

#include "cryobsn/tensor.hpp"

namespace cryobsn {

// Space-to-channel reindexing for rank-5 tensors. Pure value-preserving
// permutations, no arithmetic.
//
// volume_unshuffle: [B,C,D,H,W] -> [B, C*v^3, D/v, H/v, W/v] with
//   out[b, c*v^3 + dd*v^2 + dh*v + dw, d, h, w] = in[b, c, d*v+dd, h*v+dh, w*v+dw]
// volume_shuffle is the exact inverse under the same ordering convention.
Tensor volume_unshuffle(const Tensor& x, int v);
Tensor volume_shuffle(const Tensor& x, int v);

// Channel transpose: treats the channel axis as a rows x cols matrix and
// swaps the factors: out[q*rows + r] = in[r*cols + q]. Used to move the
// unshuffle block index between inner and outer channel position.
Tensor channel_transpose(const Tensor& x, int rows, int cols);

} // namespace cryobsn
