#pragma once

#include "bagcn/network.hpp"

#include <memory>
#include <string>

namespace bagcn {

// Checkpoint container: magic, an 8-byte little-endian header length, a JSON
// header mapping tensor names to shapes and payload offsets (plus the full
// model config), then the little-endian 64-bit float payload. Parameters and
// batch-norm running statistics both round-trip.

void save_checkpoint(const std::string& path, const BAGCNModel& model);

/// Load tensors into an existing model; shapes and names must match exactly.
void load_checkpoint_into(const std::string& path, BAGCNModel& model);

/// Rebuild the model from the embedded config and load all tensors.
std::unique_ptr<BAGCNModel> load_checkpoint(const std::string& path);

}  // namespace bagcn
