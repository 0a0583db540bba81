#pragma once

#include "bagcn/network.hpp"
#include "bagcn/train.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace bagcn {

/// Which blocks to dump: "last", "all", or a 1-based block index.
std::vector<int> resolve_layer_selector(const std::string& selector, int num_blocks);

/// Eval-mode forward passes collecting per-(sample, layer) attention maps.
/// Requires focus mode att. Multi-body samples emit one map per body with a
/// "#b<k>" id suffix.
std::vector<AttentionMap> collect_attention(BAGCNModel& model,
                                            const std::vector<PreparedSample>& data,
                                            const std::vector<int>& layers);

/// One JSON record per map: {sample_id, layer, T, V, scores: [[...]]}.
void write_attention_jsonl(const std::vector<AttentionMap>& maps, std::ostream& out);

/// Per-frame activated-joint records at the given threshold:
/// {sample_id, layer, frame, active: [joint, ...]}.
void write_activation_report(const std::vector<AttentionMap>& maps, Scalar threshold,
                             std::ostream& out);

}  // namespace bagcn
