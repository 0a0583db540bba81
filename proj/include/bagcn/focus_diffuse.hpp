#pragma once

#include "bagcn/init.hpp"
#include "bagcn/ops.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bagcn {

// The focusing/diffusion enhancement: squeeze every frame's joint features
// into one latent node, run the latent sequence through a recurrent context
// module, and gate the resulting context back into every joint.

enum class FocusMode { off, max, avg, att };
enum class ContextMode { none, uni, bi };

FocusMode parse_focus_mode(const std::string& s);
ContextMode parse_context_mode(const std::string& s);
const char* to_string(FocusMode m);
const char* to_string(ContextMode m);

/// One recurrent cell: w is [D_in + H, 4H] with gate order (i, f, o, g)
/// along the last axis, b is [4H].
struct LstmCellParams {
  Parameter w;
  Parameter b;
  Index hidden = 0;
};

struct LstmLayerParams {
  LstmCellParams forward;
  LstmCellParams backward;  // unused in uni mode
};

struct LstmState {
  Var h;
  Var c;
};

/// Per-frame attention scores in [0, 1]; the shared focusing weights and
/// diffusion gates, and the artifact behind attention dumps.
struct AttentionMap {
  std::string sample_id;
  int layer = 0;  // 1-based block index
  Index frames = 0;
  Index joints = 0;
  MatrixRM scores;  // frames x joints
};

/// Collects per-block score tensors ([*, V, T, 1]) during a forward pass.
struct AttentionRecorder {
  std::vector<std::pair<int, Tensor>> records;  // (1-based block index, scores)
};

struct FocusDiffuseParams {
  FocusMode focus = FocusMode::att;
  ContextMode context = ContextMode::bi;
  Index c_mid = 0;
  Index c_hat = 0;

  Parameter score_w;  // [C', 1], shared by focusing and diffusion gating
  Parameter score_b;  // [1]
  Parameter w1;       // [C', C'] latent-node embedding
  Parameter w2;       // [C', C'] pre-context projection
  Parameter w3;       // [C' + C_hat, C'] fusion back to the joint width
  std::vector<LstmLayerParams> cam;  // two stacked layers when context != none

  void collect(std::vector<Parameter*>& out);
};

FocusDiffuseParams make_focus_diffuse_params(const std::string& prefix, FocusMode focus,
                                             ContextMode context, Index c_mid, Index c_hat,
                                             Rng& rng);

/// sigmoid(f_in . score_w + score_b) -> [*, V, T, 1].
Var attention_scores(const Var& f_in, FocusDiffuseParams& p);

/// Per-frame latent node G_S -> [*, 1, T, C']. `scores` feeds att mode only.
Var focus(const Var& f_in, const Var& scores, FocusDiffuseParams& p);

/// Stacked recurrent context over the latent-node sequence -> [*, 1, T, C_hat].
/// Input is projected by w2 first. In bi mode each frame concatenates the
/// reverse-direction and forward-direction hidden states.
Var cam_forward(const Var& latent, FocusDiffuseParams& p);

/// Gate the context into every joint and fuse: [f_in, a * G_ST] . w3.
Var diffuse(const Var& f_in, const Var& context, const Var& scores, FocusDiffuseParams& p);

/// Full enhancement. Off mode returns `x` itself (same tape node). When a
/// recorder is given, the score tensor is stored under `block_index`.
Var fd_forward(const Var& x, FocusDiffuseParams& p, AttentionRecorder* recorder = nullptr,
               int block_index = 0);

/// One cell step; x_t and state rows are [N, *].
LstmState lstm_cell(const Var& x_t, const LstmState& prev, const Var& w, const Var& b,
                    Index hidden);

}  // namespace bagcn
