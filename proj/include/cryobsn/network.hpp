#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cryobsn/autograd.hpp"

namespace cryobsn {

enum class Arch { ubsn, unet };

// Declarative network description; lowered into a flat layer graph that both
// the runtime and the static blind-spot verifier consume.
struct NetworkSpec {
    Arch arch = Arch::ubsn;
    int base_channels = 32;  // width at the original resolution
    int l1_group_width = 4;  // per delta-group width at level 1
    int l2_group_width = 8;  // per delta-group width at level 2
    int levels = 2;
    int shuffle_v = 3;
    int mask_kernel = 5;
    int mask_center = 3;
    int dca_dilation = 3;
    int dca_encoder = 2;
    int dca_bottleneck = 2;
    int dca_decoder = 2;
    bool attention = true;
    bool use_vus = true; // false: max-pool down / trilinear up
    bool use_dca = true; // false: plain dilated conv blocks

    void validate() const;
    std::string to_text() const; // canonical key=value block
    static NetworkSpec from_text(const std::string& text);

    // spatial divisibility required of inputs
    int spatial_multiple() const;
};

enum class LayerKind {
    input,
    conv,
    unshuffle,
    shuffle,
    chan_transpose,
    ln_channel,
    gate,
    sca,
    add,
    concat,
    lrelu,
    maxpool,
    upsample
};

struct LayerDesc {
    LayerKind kind = LayerKind::input;
    std::vector<int> in; // parent node indices
    int cin = 0, cout = 0;
    int k = 1, dilation = 1, groups = 1, mask_c = 0;
    int v = 0;            // shuffle / pool / upsample factor
    int rows = 0, cols = 0; // chan_transpose
    bool bias = true;
    bool attention = true; // sca gate enabled
    std::string name;
};

struct GraphSpec {
    std::vector<LayerDesc> nodes;
    int input = 0;
    int output = 0;
};

GraphSpec lower_spec(const NetworkSpec& spec);

struct NodeParams {
    ag::Var w, b, gamma, beta, wa, wab;
    std::shared_ptr<const ag::KernelMask> mask;
};

class Network {
public:
    NetworkSpec spec;
    GraphSpec graph;
    std::vector<NodeParams> params; // parallel to graph.nodes
    uint64_t seed = 0;
    int64_t step_count = 0;

    // Builds the op graph on the shared parameter leaves. Records backward
    // closures only when grad mode is on and parameters require grad.
    ag::Var forward(const ag::Var& input) const;
    Tensor forward_nograd(const Tensor& input) const;

    std::vector<ag::Var> parameters() const;
    std::vector<std::pair<std::string, ag::Var>> named_parameters() const;
    void set_requires_grad(bool rg);
    int64_t parameter_count() const; // active scalars; masked conv taps excluded

    void check_input(const Shape5& s) const;
};

// Refuses (throws) when the static verifier reports a broken blind spot,
// unless enforce_jinv is false (ablation / counterexample builds).
Network build_network(const NetworkSpec& spec, uint64_t seed, bool enforce_jinv = true);

// CVCK checkpoint: magic, version, canonical spec text, step count, seed,
// named f32 parameter blobs.
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

} // namespace cryobsn
