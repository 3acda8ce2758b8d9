#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cryobsn/tensor.hpp"

namespace cryobsn::ag {

// One node of the reverse-mode graph. Children own their parents through
// shared_ptr, so dropping the root releases the whole step graph while
// long-lived leaves (parameters) survive.
struct Node {
    Tensor val;
    Tensor grad; // allocated on first accumulation
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn; // pulls this->grad into parents

    Tensor& grad_buf() {
        if (!has_grad) {
            grad = Tensor::zeros(val.shape);
            has_grad = true;
        }
        return grad;
    }
    void drop_grad() {
        grad = Tensor();
        has_grad = false;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& val() const { return n_->val; }
    Tensor& mutable_val() { return n_->val; }
    const Tensor& grad() const { return n_->grad; }
    bool has_grad() const { return n_ && n_->has_grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Shape5 shape() const { return n_->val.shape; }
    std::shared_ptr<Node> node() const { return n_; }
    void zero_grad() const { n_->drop_grad(); }

private:
    std::shared_ptr<Node> n_;
};

// While alive, newly created ops record no backward closures (inference mode).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a single-element root.
void backward(const Var& root);

// ---- convolution ----------------------------------------------------------

// keep[tap] == 0 marks a tap excluded from the convolution sum, forward and
// backward. central(k, c) zeroes exactly the central c^3 block.
struct KernelMask {
    int k = 0;
    std::vector<uint8_t> keep;

    static KernelMask central(int k, int c);
    int active_taps() const;
};

enum class PadMode { zero, reflect };

struct ConvOpts {
    int dilation = 1;
    int groups = 1;
    PadMode pad = PadMode::zero;
    std::shared_ptr<const KernelMask> mask; // null = dense kernel
};

// x [B,Ci,D,H,W], w [Co,Ci/groups,k,k,k], bias [1,Co,1,1,1] or undefined.
// Output spatial dims equal input dims (padding dilation*(k-1)/2).
Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvOpts& opt = {});

// ---- normalization / gating -------------------------------------------------

// Spec layer_norm: statistics per sample over (C,D,H,W) jointly, then
// per-channel affine. Carries a global dependence on the whole sample.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

// Channel-wise LayerNorm: statistics over the channels of each group at
// every (b,d,h,w) position independently. Local support, used inside the
// network blocks.
Var layer_norm_channel(const Var& x, const Var& gamma, const Var& beta, int groups = 1,
                       double eps = 1e-6);

// Splits each group's channels in half and multiplies the halves.
Var simple_gate(const Var& x, int groups = 1);

Var global_avg_pool(const Var& x);            // [B,C,1,1,1]
Var channel_scale(const Var& x, const Var& a); // x[b,c,...] * a[b,c,0,0,0]

// out = x * (wa applied as 1x1x1 conv to GAP(x) + bias), per channel.
Var channel_attention(const Var& x, const Var& wa, const Var& bias, int groups = 1);

// ---- elementwise / structural ----------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var leaky_relu(const Var& x, double slope = 0.1);
Var concat_channels(const Var& a, const Var& b);
Var sqrt_eps(const Var& x, double eps2); // sqrt(x + eps2), x >= 0 expected
Var channel_sum(const Var& x);           // [B,1,D,H,W]
Var mean_all(const Var& x);              // [1,1,1,1,1]
Var mse(const Var& a, const Var& b);     // mean squared difference, scalar

// ---- reindexing / resampling -------------------------------------------------

Var unshuffle(const Var& x, int v);
Var shuffle(const Var& x, int v);
Var chan_transpose(const Var& x, int rows, int cols);
Var max_pool(const Var& x, int v);               // non-overlapping v^3 blocks
Var upsample_trilinear(const Var& x, int v);

// Smoothed total variation: mean over voxels of sum_axis sqrt(diff^2+eps^2)
// with forward differences, last plane per axis omitted.
Var tv_smooth(const Var& x, double eps = 1e-6);

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m, s;

    void init(const std::vector<Var>& params);
};

// Bias-corrected Adam on the params' accumulated grads. Parameters are
// rounded to the nearest f32 after the update so every reachable state is
// exactly representable in checkpoints.
void adam_step(std::vector<Var>& params, AdamState& st);

} // namespace cryobsn::ag
