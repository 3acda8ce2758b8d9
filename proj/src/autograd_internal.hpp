#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cryobsn/autograd.hpp"

namespace cryobsn::ag {

// Shared node factory: wires parents and the backward closure only when some
// parent requires grad and grad mode is on.
Var make_node(Tensor val, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> backward_fn);

} // namespace cryobsn::ag
