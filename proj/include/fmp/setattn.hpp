#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fmp/error.hpp"
#include "fmp/matrix.hpp"
#include "fmp/rng.hpp"
#include "fmp/tape.hpp"

namespace fmp {

// Column layout of a point: [features | zero padding | label block]. The width is
// features + classes rounded up to a multiple of the head count.
struct PointLayout {
  std::size_t features = 0;
  std::size_t classes = 0;
  std::size_t heads = 4;

  std::size_t width() const {
    const std::size_t raw = features + classes;
    return heads == 0 ? raw : (raw + heads - 1) / heads * heads;
  }
  std::size_t label_offset() const { return width() - classes; }

  friend bool operator==(const PointLayout&, const PointLayout&) = default;
};

// An ordered set of points in a PointLayout. Observed points carry one-hot label blocks;
// decoded generated or compressed points carry probability vectors.
class PointSet {
 public:
  PointSet() = default;
  PointSet(Matrix points, PointLayout layout) : points_(std::move(points)), layout_(layout) {
    if (points_.cols() != layout_.width() && !(points_.rows() == 0 && points_.cols() == 0)) {
      throw ShapeError("PointSet: width " + std::to_string(points_.cols()) + " does not match layout width " +
                       std::to_string(layout_.width()));
    }
    if (points_.cols() == 0) points_ = Matrix(0, layout_.width());
  }

  // Builds observed points from a feature matrix and integer labels.
  static PointSet encode(const Matrix& features, std::span<const std::uint32_t> labels, PointLayout layout) {
    if (features.cols() != layout.features) throw ShapeError("PointSet::encode: feature width mismatch");
    if (features.rows() != labels.size()) throw ShapeError("PointSet::encode: label count mismatch");
    Matrix pts(features.rows(), layout.width());
    for (std::size_t i = 0; i < features.rows(); ++i) {
      for (std::size_t j = 0; j < layout.features; ++j) pts(i, j) = features(i, j);
      if (labels[i] >= layout.classes) throw RangeError("PointSet::encode: label out of range");
      pts(i, layout.label_offset() + labels[i]) = 1.0;
    }
    return PointSet(std::move(pts), layout);
  }

  std::size_t n() const noexcept { return points_.rows(); }
  std::size_t d() const noexcept { return points_.cols(); }
  bool empty() const noexcept { return points_.rows() == 0; }
  const Matrix& points() const noexcept { return points_; }
  const PointLayout& layout() const noexcept { return layout_; }

  Matrix features() const { return slice_cols(points_, 0, layout_.features); }
  Matrix labels() const { return slice_cols(points_, layout_.label_offset(), layout_.classes); }

  PointSet gather(std::span<const std::size_t> index) const { return {gather_rows(points_, index), layout_}; }

 private:
  Matrix points_;
  PointLayout layout_;
};

inline PointSet concat(std::span<const PointSet> sets) {
  if (sets.empty()) throw ProtocolError("concat: no point sets");
  std::vector<Matrix> parts;
  parts.reserve(sets.size());
  for (const auto& s : sets) {
    if (!(s.layout() == sets.front().layout())) throw ShapeError("concat: layout mismatch");
    parts.push_back(s.points());
  }
  return {concat_rows(std::span<const Matrix>(parts)), sets.front().layout()};
}

// ---- weights ----

// Two-layer per-point network x -> gelu(x W1 + b1) W2 + b2.
template <class T>
struct FeedForward {
  T w1, b1, w2, b2;
};

template <class T>
struct MabWeights {
  T wq, wk, wv, wo;
  FeedForward<T> ffn;
  std::size_t heads = 1;
  bool residual = true;
};

using MabParams = MabWeights<Matrix>;

template <class T>
struct GeneratorWeights {
  FeedForward<T> g;
  MabWeights<T> mab1;
  MabWeights<T> mab2;
};

// Frozen predictive mechanism: inducing-point network plus the two cascaded blocks.
struct GeneratorParams {
  PointLayout layout;
  GeneratorWeights<Matrix> weights;
};

enum class EmbedderMode : std::uint8_t {
  Attention = 0,
  // Diagnostic pass-through: the compressed set is the local set itself.
  Identity = 1,
};

template <class T>
struct EmbedderWeights {
  T seeds;
  FeedForward<T> f;
  MabWeights<T> mab;
};

struct EmbedderParams {
  PointLayout layout;
  EmbedderMode mode = EmbedderMode::Attention;
  EmbedderWeights<Matrix> weights;

  std::size_t seed_count() const { return weights.seeds.rows(); }
};

// Visits every tensor with a stable path-like name. The order is fixed and shared by the
// optimizer state, tape lifting and the checkpoint sections.
template <class FF, class F>
void for_each_tensor(FF& ff, const std::string& prefix, F&& f)
  requires requires { ff.w1; ff.b1; ff.w2; ff.b2; }
{
  f(prefix + "w1", ff.w1);
  f(prefix + "b1", ff.b1);
  f(prefix + "w2", ff.w2);
  f(prefix + "b2", ff.b2);
}

template <class M, class F>
void for_each_tensor(M& m, const std::string& prefix, F&& f)
  requires requires { m.wq; m.wk; m.wv; m.wo; m.ffn; }
{
  f(prefix + "wq", m.wq);
  f(prefix + "wk", m.wk);
  f(prefix + "wv", m.wv);
  f(prefix + "wo", m.wo);
  for_each_tensor(m.ffn, prefix + "ffn/", f);
}

template <class G, class F>
void for_each_tensor(G& g, const std::string& prefix, F&& f)
  requires requires { g.g; g.mab1; g.mab2; }
{
  for_each_tensor(g.g, prefix + "g/", f);
  for_each_tensor(g.mab1, prefix + "mab1/", f);
  for_each_tensor(g.mab2, prefix + "mab2/", f);
}

template <class E, class F>
void for_each_tensor(E& e, const std::string& prefix, F&& f)
  requires requires { e.seeds; e.f; e.mab; }
{
  f(prefix + "seeds", e.seeds);
  for_each_tensor(e.f, prefix + "f/", f);
  for_each_tensor(e.mab, prefix + "mab/", f);
}

template <class T>
void copy_structure(MabWeights<T>& dst, const MabParams& src) {
  dst.heads = src.heads;
  dst.residual = src.residual;
}
template <class T>
void copy_structure(GeneratorWeights<T>& dst, const GeneratorWeights<Matrix>& src) {
  copy_structure(dst.mab1, src.mab1);
  copy_structure(dst.mab2, src.mab2);
}
template <class T>
void copy_structure(EmbedderWeights<T>& dst, const EmbedderWeights<Matrix>& src) {
  copy_structure(dst.mab, src.mab);
}
template <class T>
void copy_structure(FeedForward<T>&, const FeedForward<Matrix>&) {}

// Copies Matrix weights onto a tape, as trainable leaves or as constants.
template <template <class> class W>
W<Var> lift(Tape& tape, const W<Matrix>& w, bool trainable) {
  W<Var> out;
  std::vector<Var> vars;
  for_each_tensor(w, "", [&](const std::string&, const Matrix& m) {
    vars.push_back(trainable ? tape.leaf(m, true) : tape.constant(m));
  });
  std::size_t i = 0;
  for_each_tensor(out, "", [&](const std::string&, Var& v) { v = vars[i++]; });
  copy_structure(out, w);
  return out;
}

// ---- blocks ----

template <Tensor T>
T point_mlp(const T& x, const FeedForward<T>& f) {
  return add_row(matmul(gelu(add_row(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

template <Tensor T>
T residual_mlp(const T& x, const FeedForward<T>& f) {
  return add(x, point_mlp(x, f));
}

// Multi-head attention block, no masking:
//   O = Q + MultiHead(Q, C, C),  out = O + FFN(O).
// Context rows are put in a canonical order first, so the output is bitwise invariant to
// permutations of the context; query rows are processed independently (equivariance).
template <Tensor T>
T mab(const T& queries, const T& context, const MabWeights<T>& w) {
  const Matrix& qv = value_of(queries);
  const Matrix& cv = value_of(context);
  if (qv.cols() != cv.cols()) {
    throw ShapeError("mab: query width " + std::to_string(qv.cols()) + " != context width " +
                     std::to_string(cv.cols()));
  }
  if (cv.rows() == 0) throw ProtocolError("mab: empty context set");
  const std::size_t d = qv.cols();
  if (w.heads == 0 || d % w.heads != 0) throw ShapeError("mab: head count must divide width");
  const std::size_t dh = d / w.heads;

  const auto order = canonical_row_order(cv);
  const T ctx = gather_rows(context, order);
  const T q = matmul(queries, w.wq);
  const T k = matmul(ctx, w.wk);
  const T v = matmul(ctx, w.wv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<T> heads;
  heads.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    const T qh = w.heads == 1 ? q : slice_cols(q, h * dh, dh);
    const T kh = w.heads == 1 ? k : slice_cols(k, h * dh, dh);
    const T vh = w.heads == 1 ? v : slice_cols(v, h * dh, dh);
    const T attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(attn, vh));
  }
  const T joined = w.heads == 1 ? heads.front() : concat_cols(std::span<const T>(heads));
  const T mixed = matmul(joined, w.wo);
  const T o = w.residual ? add(queries, mixed) : mixed;
  return add(o, point_mlp(o, w.ffn));
}

inline PointSet mab(const PointSet& queries, const PointSet& context, const MabParams& p) {
  return {mab(queries.points(), context.points(), p), queries.layout()};
}

// Softmax-decodes the label block so every row carries a probability vector.
template <Tensor T>
T normalize_labels(const T& z, const PointLayout& layout) {
  const std::size_t off = layout.label_offset();
  const T parts[] = {slice_cols(z, 0, off), softmax_rows(slice_cols(z, off, layout.classes))};
  return concat_cols(std::span<const T>(parts));
}

// Z' = MAB(E, MAB(E, R)) with inducing points R = g(Z).
template <Tensor T>
T isab_generate(const T& observed, const T& base, const GeneratorWeights<T>& gw) {
  if (value_of(observed).rows() == 0) throw ProtocolError("isab_generate: empty observed set");
  if (value_of(base).rows() == 0) throw ProtocolError("isab_generate: empty base set");
  const T inducing = residual_mlp(observed, gw.g);
  const T hidden = mab(base, inducing, gw.mab1);
  return mab(base, hidden, gw.mab2);
}

inline PointSet isab_generate(const PointSet& observed, const PointSet& base, const GeneratorParams& gp) {
  if (!(observed.layout() == gp.layout) || !(base.layout() == gp.layout)) {
    throw ShapeError("isab_generate: layout mismatch");
  }
  return {isab_generate(observed.points(), base.points(), gp.weights), gp.layout};
}

// h_phi(Z) = MAB(S_phi, f_phi(Z)), followed by label decoding.
template <Tensor T>
T pma_compress(const T& local, const EmbedderWeights<T>& w, EmbedderMode mode, const PointLayout& layout) {
  if (value_of(local).rows() == 0) throw ProtocolError("pma_compress: empty local set");
  if (mode == EmbedderMode::Identity) return local;
  return normalize_labels(mab(w.seeds, residual_mlp(local, w.f), w.mab), layout);
}

inline PointSet pma_compress(const PointSet& local, const EmbedderParams& phi) {
  if (!(local.layout() == phi.layout)) throw ShapeError("pma_compress: layout mismatch");
  return {pma_compress(local.points(), phi.weights, phi.mode, phi.layout), phi.layout};
}

// ---- initialization ----

inline FeedForward<Matrix> init_feedforward(std::size_t in, std::size_t hidden, std::size_t out, RngStream& rng) {
  return {sample_gaussian(rng, in, hidden, 1.0 / std::sqrt(static_cast<double>(in))), Matrix(1, hidden),
          sample_gaussian(rng, hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden))), Matrix(1, out)};
}

inline MabParams init_mab(std::size_t d, std::size_t heads, RngStream& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  MabParams p;
  p.wq = sample_gaussian(rng, d, d, s);
  p.wk = sample_gaussian(rng, d, d, s);
  p.wv = sample_gaussian(rng, d, d, s);
  p.wo = sample_gaussian(rng, d, d, s);
  p.ffn = init_feedforward(d, 2 * d, d, rng);
  p.heads = heads;
  p.residual = true;
  return p;
}

// Random Gaussian generator (std 1/sqrt(fan-in)); frozen by every protocol.
inline GeneratorParams make_generator(const PointLayout& layout, RngStream rng) {
  const std::size_t d = layout.width();
  GeneratorParams gp;
  gp.layout = layout;
  gp.weights.g = init_feedforward(d, 2 * d, d, rng);
  gp.weights.mab1 = init_mab(d, layout.heads, rng);
  gp.weights.mab2 = init_mab(d, layout.heads, rng);
  return gp;
}

inline EmbedderParams init_embedder(const PointLayout& layout, std::size_t seeds, RngStream rng) {
  if (seeds == 0) throw ConfigError("init_embedder: need at least one seed vector");
  const std::size_t d = layout.width();
  EmbedderParams phi;
  phi.layout = layout;
  phi.mode = EmbedderMode::Attention;
  // Small seeds and an identity value path: at init every summary point is close to an
  // attention-weighted average of the client's points.
  phi.weights.seeds = sample_gaussian(rng, seeds, d, 0.1);
  phi.weights.f = init_feedforward(d, 2 * d, d, rng);
  phi.weights.f.w2 = scale(phi.weights.f.w2, 0.1);
  phi.weights.mab = init_mab(d, layout.heads, rng);
  phi.weights.mab.wv = Matrix::identity(d);
  phi.weights.mab.wo = Matrix::identity(d);
  phi.weights.mab.ffn.w2 = scale(phi.weights.mab.ffn.w2, 0.1);
  return phi;
}

inline EmbedderParams identity_embedder(const PointLayout& layout) {
  EmbedderParams phi;
  phi.layout = layout;
  phi.mode = EmbedderMode::Identity;
  const std::size_t d = layout.width();
  phi.weights.seeds = Matrix(1, d);
  phi.weights.f = {Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d)};
  phi.weights.mab = {Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d),
                     {Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d)}, layout.heads, true};
  return phi;
}

}  // namespace fmp
