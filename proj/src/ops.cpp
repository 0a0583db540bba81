#include "bagcn/ops.hpp"

#include <cmath>
#include <cstdint>

namespace bagcn {

namespace {

Tape& same_tape(const Var& a, const Var& b, const char* who) {
  require(a.valid() && b.valid(), std::string(who) + ": empty operand");
  require(a.tape == b.tape, std::string(who) + ": operands recorded on different tapes");
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  require(a.same_shape(b), std::string(who) + ": shape mismatch " +
                               shape_string(std::span<const Index>(a.shape())) + " vs " +
                               shape_string(std::span<const Index>(b.shape())));
}

// Feature maps are [V, T, C] or [N, V, T, C]; n folds to 1 for rank 3.
struct Feat {
  Index n, v, t, c;
  bool batched;
};

Feat feature_dims(const Tensor& x, const char* who) {
  const Shape& s = x.shape();
  require(s.size() == 3 || s.size() == 4,
          std::string(who) + ": expected [V,T,C] or [N,V,T,C], got " +
              shape_string(std::span<const Index>(s)));
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  return {s[0], s[1], s[2], s[3], true};
}

Shape with_feature_dims(const Feat& f, Index v, Index t, Index c) {
  if (f.batched) return {f.n, v, t, c};
  return {v, t, c};
}

Var unary(const Var& x, Tensor out, Tape::BackwardFn fn) {
  return x.tape->emit(std::move(out), {x.id}, std::move(fn));
}

}  // namespace

Var constant(Tape& tape, Tensor value) { return tape.constant(std::move(value)); }

// ---- dense linear algebra ----

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(bv.rank() == 2, "matmul: right operand must be rank 2, got " +
                              shape_string(std::span<const Index>(bv.shape())));
  const Index k = av.extent(-1);
  require(k == bv.extent(0), "matmul: inner extents differ, " +
                                 shape_string(std::span<const Index>(av.shape())) + " x " +
                                 shape_string(std::span<const Index>(bv.shape())));
  const Index rows = av.numel() / k;
  const Index cols = bv.extent(1);

  Shape out_shape = av.shape();
  out_shape.back() = cols;
  Tensor out(std::move(out_shape));
  out.matrix(rows, cols).noalias() = av.matrix(rows, k) * bv.matrix(k, cols);

  return t.emit(std::move(out), {a.id, b.id}, [rows, k, cols](Tape& t, int self) {
    const auto& parents = t.parents(self);
    CMapMat g(t.grad(self).data(), rows, cols);
    CMapMat am = t.value(parents[0]).matrix(rows, k);
    CMapMat bm = t.value(parents[1]).matrix(k, cols);
    MapMat da(t.grad(parents[0]).data(), rows, k);
    MapMat db(t.grad(parents[1]).data(), k, cols);
    da.noalias() += g * bm.transpose();
    db.noalias() += am.transpose() * g;
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& t = same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require(bv.rank() == 1 && bv.extent(0) == xv.extent(-1),
          "add_bias: bias shape " + shape_string(std::span<const Index>(bv.shape())) +
              " does not match channels of " +
              shape_string(std::span<const Index>(xv.shape())));
  const Index c = xv.extent(-1);
  const Index rows = xv.numel() / c;

  Tensor out(xv.shape());
  out.matrix(rows, c) = xv.matrix(rows, c).rowwise() + bv.matrix(1, c).row(0);

  return t.emit(std::move(out), {x.id, bias.id}, [rows, c](Tape& t, int self) {
    const auto& parents = t.parents(self);
    CMapMat g(t.grad(self).data(), rows, c);
    MapMat dx(t.grad(parents[0]).data(), rows, c);
    MapMat db(t.grad(parents[1]).data(), 1, c);
    dx += g;
    db.row(0) += g.colwise().sum();
  });
}

// ---- elementwise ----

namespace {

Var binary_elementwise(const Var& a, const Var& b, const char* who, bool negate_b) {
  Tape& t = same_tape(a, b, who);
  require_same_shape(a.value(), b.value(), who);
  Tensor out(a.value().shape());
  if (negate_b)
    out.array() = a.value().array() - b.value().array();
  else
    out.array() = a.value().array() + b.value().array();
  return t.emit(std::move(out), {a.id, b.id}, [negate_b](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const ArrayX& g = t.grad(self);
    t.grad(parents[0]) += g;
    if (negate_b)
      t.grad(parents[1]) -= g;
    else
      t.grad(parents[1]) += g;
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary_elementwise(a, b, "add", false); }
Var sub(const Var& a, const Var& b) { return binary_elementwise(a, b, "sub", true); }

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape(), a.value().array() * b.value().array());
  return t.emit(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const ArrayX& g = t.grad(self);
    t.grad(parents[0]) += g * t.value(parents[1]).array();
    t.grad(parents[1]) += g * t.value(parents[0]).array();
  });
}

Var add_scalar(const Var& x, Scalar c) {
  Tensor out(x.value().shape(), x.value().array() + c);
  return unary(x, std::move(out), [](Tape& t, int self) {
    t.grad(t.parents(self)[0]) += t.grad(self);
  });
}

Var mul_scalar(const Var& x, Scalar c) {
  Tensor out(x.value().shape(), x.value().array() * c);
  return unary(x, std::move(out), [c](Tape& t, int self) {
    t.grad(t.parents(self)[0]) += t.grad(self) * c;
  });
}

Var relu(const Var& x) {
  Tensor out(x.value().shape(), x.value().array().max(0.0));
  return unary(x, std::move(out), [](Tape& t, int self) {
    const ArrayX& xv = t.value(t.parents(self)[0]).array();
    t.grad(t.parents(self)[0]) += t.grad(self) * (xv > 0.0).cast<Scalar>();
  });
}

Var sigmoid(const Var& x) {
  // Branch on sign to keep exp() in the underflow-safe direction.
  Tensor out(x.value().shape(), x.value().array().unaryExpr([](Scalar v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (1.0 + e);
  }));
  return unary(x, std::move(out), [](Tape& t, int self) {
    const ArrayX& y = t.value(self).array();
    t.grad(t.parents(self)[0]) += t.grad(self) * y * (1.0 - y);
  });
}

Var tanh(const Var& x) {
  Tensor out(x.value().shape(), x.value().array().tanh());
  return unary(x, std::move(out), [](Tape& t, int self) {
    const ArrayX& y = t.value(self).array();
    t.grad(t.parents(self)[0]) += t.grad(self) * (1.0 - y * y);
  });
}

// ---- shape plumbing ----

Var concat_channels(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "concat_channels");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == bv.rank(), "concat_channels: rank mismatch");
  for (Index axis = 0; axis + 1 < av.rank(); ++axis)
    require(av.extent(axis) == bv.extent(axis),
            "concat_channels: non-channel extents differ, " +
                shape_string(std::span<const Index>(av.shape())) + " vs " +
                shape_string(std::span<const Index>(bv.shape())));
  const Index ca = av.extent(-1);
  const Index cb = bv.extent(-1);
  const Index rows = av.numel() / ca;

  Shape out_shape = av.shape();
  out_shape.back() = ca + cb;
  Tensor out(std::move(out_shape));
  MapMat om = out.matrix(rows, ca + cb);
  om.leftCols(ca) = av.matrix(rows, ca);
  om.rightCols(cb) = bv.matrix(rows, cb);

  return t.emit(std::move(out), {a.id, b.id}, [rows, ca, cb](Tape& t, int self) {
    const auto& parents = t.parents(self);
    CMapMat g(t.grad(self).data(), rows, ca + cb);
    MapMat(t.grad(parents[0]).data(), rows, ca) += g.leftCols(ca);
    MapMat(t.grad(parents[1]).data(), rows, cb) += g.rightCols(cb);
  });
}

Var slice_channels(const Var& x, Index start, Index count) {
  const Tensor& xv = x.value();
  const Index c = xv.extent(-1);
  require(start >= 0 && count >= 1 && start + count <= c, "slice_channels: range out of bounds");
  const Index rows = xv.numel() / c;

  Shape out_shape = xv.shape();
  out_shape.back() = count;
  Tensor out(std::move(out_shape));
  out.matrix(rows, count) = xv.matrix(rows, c).middleCols(start, count);

  return unary(x, std::move(out), [rows, c, start, count](Tape& t, int self) {
    CMapMat g(t.grad(self).data(), rows, count);
    MapMat dx(t.grad(t.parents(self)[0]).data(), rows, c);
    dx.middleCols(start, count) += g;
  });
}

Var pad_channels(const Var& x, Index target) {
  const Tensor& xv = x.value();
  const Index c = xv.extent(-1);
  require(target >= c, "pad_channels: target narrower than input");
  if (target == c) return reshape(x, xv.shape());
  const Index rows = xv.numel() / c;

  Shape out_shape = xv.shape();
  out_shape.back() = target;
  Tensor out(std::move(out_shape));
  out.matrix(rows, target).leftCols(c) = xv.matrix(rows, c);

  return unary(x, std::move(out), [rows, c, target](Tape& t, int self) {
    CMapMat g(t.grad(self).data(), rows, target);
    MapMat dx(t.grad(t.parents(self)[0]).data(), rows, c);
    dx += g.leftCols(c);
  });
}

Var reshape(const Var& x, Shape shape) {
  const Tensor& xv = x.value();
  require(shape_numel(std::span<const Index>(shape)) == xv.numel(),
          "reshape: numel mismatch, " + shape_string(std::span<const Index>(xv.shape())) +
              " -> " + shape_string(std::span<const Index>(shape)));
  Tensor out(std::move(shape), xv.array());
  return unary(x, std::move(out), [](Tape& t, int self) {
    t.grad(t.parents(self)[0]) += t.grad(self);
  });
}

// ---- normalization, convolution, loss ----

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               Mode mode) {
  Tape& t = same_tape(x, gamma, "batch_norm");
  same_tape(gamma, beta, "batch_norm");
  const Tensor& xv = x.value();
  const Index c = xv.extent(-1);
  require(gamma.value().rank() == 1 && gamma.value().extent(0) == c &&
              beta.value().rank() == 1 && beta.value().extent(0) == c,
          "batch_norm: affine parameters must be rank-1 of the channel width");
  require(state.running_mean.size() == c, "batch_norm: state width mismatch");
  const Index m = xv.numel() / c;
  require(m >= 1, "batch_norm: empty batch");

  ArrayX mean(c), invstd(c);
  CMapMat rows = xv.matrix(m, c);
  if (mode == Mode::train) {
    mean = rows.colwise().mean().array();
    ArrayX var(c);
    for (Index j = 0; j < c; ++j)
      var[j] = (rows.col(j).array() - mean[j]).square().mean();
    invstd = (var + state.eps).sqrt().inverse();
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
    state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var;
  } else {
    mean = state.running_mean;
    invstd = (state.running_var + state.eps).sqrt().inverse();
  }

  Tensor out(xv.shape());
  MapMat om = out.matrix(m, c);
  const ArrayX gammav = gamma.value().array();
  const ArrayX betav = beta.value().array();
  for (Index j = 0; j < c; ++j)
    om.col(j).array() = (rows.col(j).array() - mean[j]) * invstd[j] * gammav[j] + betav[j];

  const bool train = mode == Mode::train;
  return t.emit(std::move(out), {x.id, gamma.id, beta.id},
                [m, c, mean, invstd, train](Tape& t, int self) {
                  const auto& parents = t.parents(self);
                  CMapMat g(t.grad(self).data(), m, c);
                  CMapMat rows = t.value(parents[0]).matrix(m, c);
                  const ArrayX gammav = t.value(parents[1]).array();
                  MapMat dx(t.grad(parents[0]).data(), m, c);
                  MapMat dgamma(t.grad(parents[1]).data(), 1, c);
                  MapMat dbeta(t.grad(parents[2]).data(), 1, c);
                  for (Index j = 0; j < c; ++j) {
                    ArrayX xhat = (rows.col(j).array() - mean[j]) * invstd[j];
                    ArrayX gj = g.col(j).array();
                    const Scalar gsum = gj.sum();
                    const Scalar gxsum = (gj * xhat).sum();
                    dbeta(0, j) += gsum;
                    dgamma(0, j) += gxsum;
                    if (train) {
                      // d/dx of batch-stat normalization: remove the mean and
                      // the xhat-aligned component before rescaling.
                      dx.col(j).array() += gammav[j] * invstd[j] *
                                           (gj - gsum / Scalar(m) - xhat * (gxsum / Scalar(m)));
                    } else {
                      dx.col(j).array() += gammav[j] * invstd[j] * gj;
                    }
                  }
                });
}

namespace {

struct ConvDims {
  Index n, v, t, c_in, c_out, k, stride, pad, t_out;
  bool batched;
};

// Xcol layout: row = output frame, column = k * C_in + i.
void fill_xcol(const Scalar* xslab, const ConvDims& d, MatrixRM& xcol) {
  xcol.setZero();
  for (Index to = 0; to < d.t_out; ++to) {
    for (Index k = 0; k < d.k; ++k) {
      const Index ti = to * d.stride + k - d.pad;
      if (ti < 0 || ti >= d.t) continue;
      for (Index i = 0; i < d.c_in; ++i) xcol(to, k * d.c_in + i) = xslab[ti * d.c_in + i];
    }
  }
}

}  // namespace

Var conv_temporal(const Var& x, const Var& w, Index stride) {
  Tape& t = same_tape(x, w, "conv_temporal");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(stride >= 1, "conv_temporal: stride must be >= 1, got " + std::to_string(stride));
  require(wv.rank() == 3, "conv_temporal: weight must be [C_out, C_in, K_t]");
  Feat f = feature_dims(xv, "conv_temporal");
  ConvDims d{f.n,          f.v,          f.t, f.c, wv.extent(0), wv.extent(2),
             stride,       0,            0,   f.batched};
  require(d.k % 2 == 1, "conv_temporal: kernel length must be odd");
  require(wv.extent(1) == d.c_in,
          "conv_temporal: weight C_in " + std::to_string(wv.extent(1)) +
              " does not match input channels " + std::to_string(d.c_in));
  d.pad = (d.k - 1) / 2;
  d.t_out = (d.t - 1) / d.stride + 1;

  // w[o, i, k] regrouped so one GEMM per joint covers all taps.
  MatrixRM wcol(d.k * d.c_in, d.c_out);
  for (Index o = 0; o < d.c_out; ++o)
    for (Index i = 0; i < d.c_in; ++i)
      for (Index k = 0; k < d.k; ++k)
        wcol(k * d.c_in + i, o) = wv.array()[(o * d.c_in + i) * d.k + k];

  Tensor out(with_feature_dims(f, d.v, d.t_out, d.c_out));
  MatrixRM xcol(d.t_out, d.k * d.c_in);
  for (Index n = 0; n < d.n; ++n) {
    for (Index v = 0; v < d.v; ++v) {
      const Scalar* xslab = xv.data() + ((n * d.v + v) * d.t) * d.c_in;
      fill_xcol(xslab, d, xcol);
      MapMat(out.data() + ((n * d.v + v) * d.t_out) * d.c_out, d.t_out, d.c_out).noalias() =
          xcol * wcol;
    }
  }

  return t.emit(std::move(out), {x.id, w.id}, [d, wcol](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const Tensor& xv = t.value(parents[0]);
    ArrayX& dx = t.grad(parents[0]);
    ArrayX& dw = t.grad(parents[1]);
    const ArrayX& g = t.grad(self);

    MatrixRM xcol(d.t_out, d.k * d.c_in);
    MatrixRM dwcol = MatrixRM::Zero(d.k * d.c_in, d.c_out);
    MatrixRM dxcol(d.t_out, d.k * d.c_in);
    for (Index n = 0; n < d.n; ++n) {
      for (Index v = 0; v < d.v; ++v) {
        const Scalar* xslab = xv.data() + ((n * d.v + v) * d.t) * d.c_in;
        CMapMat gslab(g.data() + ((n * d.v + v) * d.t_out) * d.c_out, d.t_out, d.c_out);
        fill_xcol(xslab, d, xcol);
        dwcol.noalias() += xcol.transpose() * gslab;
        dxcol.noalias() = gslab * wcol.transpose();
        Scalar* dxslab = dx.data() + ((n * d.v + v) * d.t) * d.c_in;
        for (Index to = 0; to < d.t_out; ++to) {
          for (Index k = 0; k < d.k; ++k) {
            const Index ti = to * d.stride + k - d.pad;
            if (ti < 0 || ti >= d.t) continue;
            for (Index i = 0; i < d.c_in; ++i)
              dxslab[ti * d.c_in + i] += dxcol(to, k * d.c_in + i);
          }
        }
      }
    }
    for (Index o = 0; o < d.c_out; ++o)
      for (Index i = 0; i < d.c_in; ++i)
        for (Index k = 0; k < d.k; ++k) dw[(o * d.c_in + i) * d.k + k] += dwcol(k * d.c_in + i, o);
  });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Tensor& lv = logits.value();
  require(lv.rank() == 2, "softmax_cross_entropy: logits must be [N, K]");
  const Index n = lv.extent(0);
  const Index k = lv.extent(1);
  require(static_cast<Index>(labels.size()) == n,
          "softmax_cross_entropy: expected " + std::to_string(n) + " labels, got " +
              std::to_string(labels.size()));
  for (int label : labels)
    require(label >= 0 && label < k,
            "softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                std::to_string(k) + ")");

  MatrixRM probs(n, k);
  Scalar loss = 0.0;
  CMapMat lm = lv.matrix(n, k);
  for (Index r = 0; r < n; ++r) {
    const Scalar rowmax = lm.row(r).maxCoeff();
    ArrayX shifted = lm.row(r).array() - rowmax;
    ArrayX ex = shifted.exp();
    const Scalar z = ex.sum();
    probs.row(r) = (ex / z).matrix();
    loss -= shifted[labels[static_cast<size_t>(r)]] - std::log(z);
  }
  loss /= Scalar(n);

  return t.emit(Tensor::scalar(loss), {logits.id}, [n, k, probs, labels](Tape& t, int self) {
    const Scalar g = t.grad(self)[0] / Scalar(n);
    MapMat dl(t.grad(t.parents(self)[0]).data(), n, k);
    dl += g * probs;
    for (Index r = 0; r < n; ++r) dl(r, labels[static_cast<size_t>(r)]) -= g;
  });
}

// ---- graph and attention ----

Var graph_matmul(const Var& adj, const Var& x) {
  Tape& t = same_tape(adj, x, "graph_matmul");
  const Tensor& av = adj.value();
  const Tensor& xv = x.value();
  require(av.rank() == 2 && av.extent(0) == av.extent(1),
          "graph_matmul: adjacency must be square, got " +
              shape_string(std::span<const Index>(av.shape())));
  Feat f = feature_dims(xv, "graph_matmul");
  require(av.extent(0) == f.v, "graph_matmul: adjacency order " + std::to_string(av.extent(0)) +
                                   " does not match joint extent " + std::to_string(f.v));
  const Index cols = f.t * f.c;

  Tensor out(xv.shape());
  CMapMat am = av.matrix(f.v, f.v);
  for (Index n = 0; n < f.n; ++n) {
    CMapMat xn(xv.data() + n * f.v * cols, f.v, cols);
    MapMat(out.data() + n * f.v * cols, f.v, cols).noalias() = am * xn;
  }

  return t.emit(std::move(out), {adj.id, x.id}, [f, cols](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const Tensor& av = t.value(parents[0]);
    const Tensor& xv = t.value(parents[1]);
    CMapMat am = av.matrix(f.v, f.v);
    MapMat da(t.grad(parents[0]).data(), f.v, f.v);
    ArrayX& dxbuf = t.grad(parents[1]);
    const ArrayX& g = t.grad(self);
    for (Index n = 0; n < f.n; ++n) {
      CMapMat gn(g.data() + n * f.v * cols, f.v, cols);
      CMapMat xn(xv.data() + n * f.v * cols, f.v, cols);
      MapMat dxn(dxbuf.data() + n * f.v * cols, f.v, cols);
      da.noalias() += gn * xn.transpose();
      dxn.noalias() += am.transpose() * gn;
    }
  });
}

namespace {

void require_score_shape(const Feat& fx, const Tensor& scores, const char* who) {
  Feat fs = feature_dims(scores, who);
  require(fs.n == fx.n && fs.v == fx.v && fs.t == fx.t && fs.c == 1 && fs.batched == fx.batched,
          std::string(who) + ": scores must be per-(joint, frame) scalars matching the "
                             "feature map, got " +
              shape_string(std::span<const Index>(scores.shape())));
}

}  // namespace

Var attention_pool(const Var& scores, const Var& x) {
  Tape& t = same_tape(scores, x, "attention_pool");
  const Tensor& sv = scores.value();
  const Tensor& xv = x.value();
  Feat f = feature_dims(xv, "attention_pool");
  require_score_shape(f, sv, "attention_pool");

  Tensor out(with_feature_dims(f, 1, f.t, f.c));
  for (Index n = 0; n < f.n; ++n) {
    MatrixRM num = MatrixRM::Zero(f.t, f.c);
    ArrayX den = ArrayX::Zero(f.t);
    for (Index v = 0; v < f.v; ++v) {
      CMapMat xs(xv.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
      Eigen::Map<const ArrayX> a(sv.data() + (n * f.v + v) * f.t, f.t);
      num.array() += xs.array().colwise() * a;
      den += a;
    }
    require((den > 0.0).all(), "attention_pool: joint weights sum to zero in some frame");
    MapMat on(out.data() + n * f.t * f.c, f.t, f.c);
    on.array() = num.array().colwise() / den;
  }

  return t.emit(std::move(out), {scores.id, x.id}, [f](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const Tensor& sv = t.value(parents[0]);
    const Tensor& xv = t.value(parents[1]);
    const Tensor& ov = t.value(self);
    ArrayX& ds = t.grad(parents[0]);
    ArrayX& dx = t.grad(parents[1]);
    const ArrayX& g = t.grad(self);
    for (Index n = 0; n < f.n; ++n) {
      ArrayX den = ArrayX::Zero(f.t);
      for (Index v = 0; v < f.v; ++v)
        den += Eigen::Map<const ArrayX>(sv.data() + (n * f.v + v) * f.t, f.t);
      CMapMat gn(g.data() + n * f.t * f.c, f.t, f.c);
      CMapMat on(ov.data() + n * f.t * f.c, f.t, f.c);
      for (Index v = 0; v < f.v; ++v) {
        CMapMat xs(xv.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
        Eigen::Map<const ArrayX> a(sv.data() + (n * f.v + v) * f.t, f.t);
        Eigen::Map<ArrayX> dsv(ds.data() + (n * f.v + v) * f.t, f.t);
        MapMat dxs(dx.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
        // d out / d a_v = (x_v - out) / den; d out / d x_v = a_v / den.
        dsv += (gn.array() * (xs - on).array()).rowwise().sum() / den;
        dxs.array() += gn.array().colwise() * (a / den);
      }
    }
  });
}

Var mean_joints(const Var& x) {
  const Tensor& xv = x.value();
  Feat f = feature_dims(xv, "mean_joints");

  Tensor out(with_feature_dims(f, 1, f.t, f.c));
  for (Index n = 0; n < f.n; ++n) {
    MatrixRM acc = MatrixRM::Zero(f.t, f.c);
    for (Index v = 0; v < f.v; ++v)
      acc += CMapMat(xv.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
    MapMat(out.data() + n * f.t * f.c, f.t, f.c).array() = acc.array() / Scalar(f.v);
  }

  return unary(x, std::move(out), [f](Tape& t, int self) {
    ArrayX& dx = t.grad(t.parents(self)[0]);
    const ArrayX& g = t.grad(self);
    for (Index n = 0; n < f.n; ++n) {
      CMapMat gn(g.data() + n * f.t * f.c, f.t, f.c);
      for (Index v = 0; v < f.v; ++v)
        MapMat(dx.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c).array() +=
            gn.array() / Scalar(f.v);
    }
  });
}

Var max_joints(const Var& x) {
  const Tensor& xv = x.value();
  Feat f = feature_dims(xv, "max_joints");

  Tensor out(with_feature_dims(f, 1, f.t, f.c));
  std::vector<int32_t> argmax(static_cast<size_t>(f.n * f.t * f.c), 0);
  for (Index n = 0; n < f.n; ++n) {
    MapMat on(out.data() + n * f.t * f.c, f.t, f.c);
    on = CMapMat(xv.data() + (n * f.v) * f.t * f.c, f.t, f.c);
    for (Index v = 1; v < f.v; ++v) {
      CMapMat xs(xv.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
      for (Index tt = 0; tt < f.t; ++tt)
        for (Index cc = 0; cc < f.c; ++cc)
          if (xs(tt, cc) > on(tt, cc)) {  // strict: ties keep the lowest joint
            on(tt, cc) = xs(tt, cc);
            argmax[static_cast<size_t>((n * f.t + tt) * f.c + cc)] = static_cast<int32_t>(v);
          }
    }
  }

  return unary(x, std::move(out), [f, argmax](Tape& t, int self) {
    ArrayX& dx = t.grad(t.parents(self)[0]);
    const ArrayX& g = t.grad(self);
    for (Index n = 0; n < f.n; ++n)
      for (Index tt = 0; tt < f.t; ++tt)
        for (Index cc = 0; cc < f.c; ++cc) {
          const Index v = argmax[static_cast<size_t>((n * f.t + tt) * f.c + cc)];
          dx[((n * f.v + v) * f.t + tt) * f.c + cc] += g[(n * f.t + tt) * f.c + cc];
        }
  });
}

Var gate_broadcast(const Var& scores, const Var& context) {
  Tape& t = same_tape(scores, context, "gate_broadcast");
  const Tensor& sv = scores.value();
  const Tensor& cv = context.value();
  Feat fs = feature_dims(sv, "gate_broadcast");
  Feat fc = feature_dims(cv, "gate_broadcast");
  require(fs.c == 1, "gate_broadcast: scores must have one channel");
  require(fc.v == 1, "gate_broadcast: context must have a singleton joint axis");
  require(fs.n == fc.n && fs.t == fc.t && fs.batched == fc.batched,
          "gate_broadcast: width mismatch, scores " +
              shape_string(std::span<const Index>(sv.shape())) + " vs context " +
              shape_string(std::span<const Index>(cv.shape())));
  const Feat f{fs.n, fs.v, fs.t, fc.c, fs.batched};

  Tensor out(with_feature_dims(f, f.v, f.t, f.c));
  for (Index n = 0; n < f.n; ++n) {
    CMapMat ctx(cv.data() + n * f.t * f.c, f.t, f.c);
    for (Index v = 0; v < f.v; ++v) {
      Eigen::Map<const ArrayX> a(sv.data() + (n * f.v + v) * f.t, f.t);
      MapMat(out.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c).array() =
          ctx.array().colwise() * a;
    }
  }

  return t.emit(std::move(out), {scores.id, context.id}, [f](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const Tensor& sv = t.value(parents[0]);
    const Tensor& cv = t.value(parents[1]);
    ArrayX& ds = t.grad(parents[0]);
    ArrayX& dc = t.grad(parents[1]);
    const ArrayX& g = t.grad(self);
    for (Index n = 0; n < f.n; ++n) {
      CMapMat ctx(cv.data() + n * f.t * f.c, f.t, f.c);
      MapMat dctx(dc.data() + n * f.t * f.c, f.t, f.c);
      for (Index v = 0; v < f.v; ++v) {
        CMapMat gs(g.data() + ((n * f.v + v) * f.t) * f.c, f.t, f.c);
        Eigen::Map<const ArrayX> a(sv.data() + (n * f.v + v) * f.t, f.t);
        Eigen::Map<ArrayX> dsv(ds.data() + (n * f.v + v) * f.t, f.t);
        dsv += (gs.array() * ctx.array()).rowwise().sum();
        dctx.array() += gs.array().colwise() * a;
      }
    }
  });
}

// ---- sequence plumbing ----

Var slice_time(const Var& x, Index frame) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "slice_time: expected [N, T, C]");
  const Index n = xv.extent(0), tlen = xv.extent(1), c = xv.extent(2);
  require(frame >= 0 && frame < tlen, "slice_time: frame out of range");

  Tensor out({n, c});
  for (Index r = 0; r < n; ++r)
    out.matrix(n, c).row(r) = CMapMat(xv.data() + (r * tlen + frame) * c, 1, c);

  return unary(x, std::move(out), [n, tlen, c, frame](Tape& t, int self) {
    CMapMat g(t.grad(self).data(), n, c);
    ArrayX& dx = t.grad(t.parents(self)[0]);
    for (Index r = 0; r < n; ++r)
      Eigen::Map<ArrayX>(dx.data() + (r * tlen + frame) * c, c) += g.row(r).array().transpose();
  });
}

Var stack_time(std::span<const Var> frames) {
  require(!frames.empty(), "stack_time: no frames");
  Tape& t = *frames.front().tape;
  const Tensor& first = frames.front().value();
  require(first.rank() == 2, "stack_time: frames must be [N, C]");
  const Index n = first.extent(0), c = first.extent(1);
  const Index tlen = static_cast<Index>(frames.size());

  std::vector<int> parents;
  parents.reserve(frames.size());
  Tensor out({n, tlen, c});
  for (Index ft = 0; ft < tlen; ++ft) {
    const Var& fr = frames[static_cast<size_t>(ft)];
    require(fr.tape == &t, "stack_time: frames on different tapes");
    require_same_shape(fr.value(), first, "stack_time");
    parents.push_back(fr.id);
    CMapMat fm = fr.value().matrix(n, c);
    for (Index r = 0; r < n; ++r)
      MapMat(out.data() + (r * tlen + ft) * c, 1, c) = fm.row(r);
  }

  return t.emit(std::move(out), std::move(parents), [n, tlen, c](Tape& t, int self) {
    const auto& parents = t.parents(self);
    const ArrayX& g = t.grad(self);
    for (Index ft = 0; ft < tlen; ++ft) {
      MapMat df(t.grad(parents[static_cast<size_t>(ft)]).data(), n, c);
      for (Index r = 0; r < n; ++r)
        df.row(r) += CMapMat(g.data() + (r * tlen + ft) * c, 1, c);
    }
  });
}

// ---- reductions ----

Var sum(const Var& x) {
  Tensor out = Tensor::scalar(x.value().array().sum());
  return unary(x, std::move(out), [](Tape& t, int self) {
    t.grad(t.parents(self)[0]) += t.grad(self)[0];
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool: expected [N, V, T, C]");
  const Index n = xv.extent(0), cells = xv.extent(1) * xv.extent(2), c = xv.extent(3);

  Tensor out({n, c});
  for (Index r = 0; r < n; ++r)
    out.matrix(n, c).row(r).array() =
        CMapMat(xv.data() + r * cells * c, cells, c).colwise().sum().array() / Scalar(cells);

  return unary(x, std::move(out), [n, cells, c](Tape& t, int self) {
    CMapMat g(t.grad(self).data(), n, c);
    ArrayX& dx = t.grad(t.parents(self)[0]);
    for (Index r = 0; r < n; ++r)
      MapMat(dx.data() + r * cells * c, cells, c).array().rowwise() +=
          g.row(r).array() / Scalar(cells);
  });
}

Var mean_rows_by_group(const Var& x, const std::vector<int>& groups, Index num_groups) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "mean_rows_by_group: expected [N, C]");
  const Index n = xv.extent(0), c = xv.extent(1);
  require(static_cast<Index>(groups.size()) == n, "mean_rows_by_group: one group id per row");
  std::vector<Index> counts(static_cast<size_t>(num_groups), 0);
  for (int gid : groups) {
    require(gid >= 0 && gid < num_groups, "mean_rows_by_group: group id out of range");
    ++counts[static_cast<size_t>(gid)];
  }
  for (Index gid = 0; gid < num_groups; ++gid)
    require(counts[static_cast<size_t>(gid)] > 0,
            "mean_rows_by_group: group " + std::to_string(gid) + " has no rows");

  Tensor out({num_groups, c});
  MapMat om = out.matrix(num_groups, c);
  CMapMat xm = xv.matrix(n, c);
  for (Index r = 0; r < n; ++r) om.row(groups[static_cast<size_t>(r)]) += xm.row(r);
  for (Index gid = 0; gid < num_groups; ++gid)
    om.row(gid) /= Scalar(counts[static_cast<size_t>(gid)]);

  return unary(x, std::move(out), [n, c, groups, counts](Tape& t, int self) {
    CMapMat g(t.grad(self).data(), static_cast<Index>(counts.size()), c);
    MapMat dx(t.grad(t.parents(self)[0]).data(), n, c);
    for (Index r = 0; r < n; ++r) {
      const int gid = groups[static_cast<size_t>(r)];
      dx.row(r) += g.row(gid) / Scalar(counts[static_cast<size_t>(gid)]);
    }
  });
}

}  // namespace bagcn
