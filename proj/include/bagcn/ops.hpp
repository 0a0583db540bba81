#pragma once

#include "bagcn/tape.hpp"

#include <span>
#include <vector>

namespace bagcn {

// Differentiable operations over tape values. Feature maps follow the layout
// [V, T, C] for one sample or [N, V, T, C] for a batch; the channel axis is
// always last. There is no implicit broadcasting: every operation states its
// shape contract and rejects mismatches with both shapes in the message.

Var constant(Tape& tape, Tensor value);

// ---- dense linear algebra ----

/// Contract the last axis of `a` (any rank) with the rows of rank-2 `b`.
/// For rank-2 `a` this is the ordinary matrix product.
Var matmul(const Var& a, const Var& b);

/// x[..., C] + bias[C], broadcast over all leading axes.
Var add_bias(const Var& x, const Var& bias);

// ---- elementwise (equal shapes; scalar variants take a plain constant) ----

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& x, Scalar c);
Var mul_scalar(const Var& x, Scalar c);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- shape plumbing ----

/// Concatenate along the channel (last) axis; all other extents must match.
Var concat_channels(const Var& a, const Var& b);

/// Keep channels [start, start+count) of the last axis.
Var slice_channels(const Var& x, Index start, Index count);

/// Zero-pad the channel axis up to `target` channels.
Var pad_channels(const Var& x, Index target);

/// Same numel, new shape (row-major reinterpretation).
Var reshape(const Var& x, Shape shape);

// ---- normalization, convolution, loss ----

/// Running statistics and fixed constants for one batch-norm layer.
struct BatchNormState {
  ArrayX running_mean;
  ArrayX running_var;
  Scalar momentum = 0.9;
  Scalar eps = 1e-5;

  explicit BatchNormState(Index channels = 0) { reset(channels); }
  void reset(Index channels) {
    running_mean = ArrayX::Zero(channels);
    running_var = ArrayX::Ones(channels);
  }
};

enum class Mode { train, eval };

/// Per-channel normalization over all leading axes. Train mode normalizes by
/// batch statistics and folds them into the running buffers; eval mode uses
/// the running buffers and mutates nothing.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               Mode mode);

/// 1-D convolution along T, independently per joint, zero same-padding.
/// x: [V, T, C_in] or [N, V, T, C_in]; w: [C_out, C_in, K_t] with K_t odd.
/// Output time length is ceil(T / stride).
Var conv_temporal(const Var& x, const Var& w, Index stride);

/// Mean over the batch of -log softmax(logits)[label]; max-stabilized.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

// ---- graph and attention ----

/// out[n, v, t, :] = sum_u adj(v, u) * x[n, u, t, :] with adj differentiable
/// (adjacency entries may come from learnable edge-importance masks).
Var graph_matmul(const Var& adj, const Var& x);

/// Normalized convex combination over joints, per frame:
/// out[n, 0, t, c] = sum_v a[n,v,t,0] * x[n,v,t,c] / sum_v a[n,v,t,0].
Var attention_pool(const Var& scores, const Var& x);

/// Mean / per-channel max over the joint axis, keeping a singleton joint.
Var mean_joints(const Var& x);
Var max_joints(const Var& x);

/// out[n, v, t, c] = scores[n,v,t,0] * context[n,0,t,c] — every joint
/// receives the frame context scaled by its own gate.
Var gate_broadcast(const Var& scores, const Var& context);

// ---- sequence plumbing (CAM unrolling) ----

/// Pick frame t of x[N, T, C] -> [N, C].
Var slice_time(const Var& x, Index t);

/// Stack T frames of [N, C] into [N, T, C].
Var stack_time(std::span<const Var> frames);

// ---- reductions ----

Var sum(const Var& x);  // -> [1]

/// Mean over joints and frames of x[N, V, T, C] -> [N, C].
Var global_avg_pool(const Var& x);

/// Average rows of x[N, C] sharing a group id -> [G, C]. Every group in
/// [0, num_groups) must own at least one row. Used to merge multi-body
/// batch entries into one pooled feature per sample.
Var mean_rows_by_group(const Var& x, const std::vector<int>& groups, Index num_groups);

}  // namespace bagcn
