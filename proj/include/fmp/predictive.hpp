#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "fmp/error.hpp"
#include "fmp/matrix.hpp"
#include "fmp/optim.hpp"
#include "fmp/parallel.hpp"
#include "fmp/rng.hpp"
#include "fmp/setattn.hpp"
#include "fmp/tape.hpp"

namespace fmp {

// Downstream classifier: features -> tanh hidden layer -> class logits.
struct ClassifierShape {
  std::size_t features = 0;
  std::size_t hidden = 0;
  std::size_t classes = 0;

  std::size_t parameter_count() const { return features * hidden + hidden + hidden * classes + classes; }
  friend bool operator==(const ClassifierShape&, const ClassifierShape&) = default;
};

template <class T>
struct ClassifierWeights {
  T w1, b1, w2, b2;
};

// Flat parameter vector theta of one classifier.
struct ModelParams {
  ClassifierShape shape;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

inline ClassifierWeights<Matrix> unpack(const ModelParams& p) {
  const auto& s = p.shape;
  if (p.values.size() != s.parameter_count()) throw ShapeError("unpack: parameter count mismatch");
  auto it = p.values.begin();
  auto take = [&it](std::size_t r, std::size_t c) {
    std::vector<double> v(it, it + static_cast<std::ptrdiff_t>(r * c));
    it += static_cast<std::ptrdiff_t>(r * c);
    return Matrix(r, c, std::move(v));
  };
  ClassifierWeights<Matrix> w;
  w.w1 = take(s.features, s.hidden);
  w.b1 = take(1, s.hidden);
  w.w2 = take(s.hidden, s.classes);
  w.b2 = take(1, s.classes);
  return w;
}

inline ModelParams pack(const ClassifierShape& shape, const ClassifierWeights<Matrix>& w) {
  ModelParams p{shape, {}};
  p.values.reserve(shape.parameter_count());
  for (const Matrix* m : {&w.w1, &w.b1, &w.w2, &w.b2}) p.values.insert(p.values.end(), m->values().begin(), m->values().end());
  if (p.values.size() != shape.parameter_count()) throw ShapeError("pack: weights do not match shape");
  return p;
}

// Gaussian weights with std 1/sqrt(fan-in), zero biases.
inline ModelParams init_classifier(const ClassifierShape& shape, RngStream rng) {
  ClassifierWeights<Matrix> w;
  w.w1 = sample_gaussian(rng, shape.features, shape.hidden, 1.0 / std::sqrt(static_cast<double>(shape.features)));
  w.b1 = Matrix(1, shape.hidden);
  w.w2 = sample_gaussian(rng, shape.hidden, shape.classes, 1.0 / std::sqrt(static_cast<double>(shape.hidden)));
  w.b2 = Matrix(1, shape.classes);
  return pack(shape, w);
}

enum class Provenance : std::uint8_t { MP = 0, LMP = 1, CFMP = 2, FMP = 3, CANN = 4, ANN = 5, LANN = 6 };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::MP: return "MP";
    case Provenance::LMP: return "LMP";
    case Provenance::CFMP: return "CFMP";
    case Provenance::FMP: return "FMP";
    case Provenance::CANN: return "CANN";
    case Provenance::ANN: return "ANN";
    case Provenance::LANN: return "LANN";
  }
  return "?";
}

struct PosteriorSamples {
  Provenance provenance = Provenance::MP;
  std::vector<ModelParams> members;
  std::vector<std::uint64_t> seeds;

  std::size_t size() const noexcept { return members.size(); }
};

struct ErmOptions {
  std::size_t steps = 2000;
  // Minibatch size drawn with replacement each step; 0 means full batch.
  std::size_t batch = 0;
  std::size_t hidden = 16;
  AdamHyper adam{};
};

inline ClassifierShape classifier_shape(const PointLayout& layout, const ErmOptions& opts) {
  return {layout.features, opts.hidden, layout.classes};
}

// Sub-streams of a draw's stream: base set, classifier init, minibatch order.
inline RngStream base_stream(const RngStream& draw) { return draw.derive(0xBA5E); }
inline RngStream init_stream(const RngStream& draw) { return draw.derive(0x1417); }
inline RngStream order_stream(const RngStream& draw) { return draw.derive(0x0D3E); }

// ---- classifier maths, shared by the plain and the unrolled solver ----

template <Tensor T>
T classifier_logits(const ClassifierWeights<T>& w, const T& x) {
  const T h = tanh(add_row(matmul(x, w.w1), w.b1));
  return add_row(matmul(h, w.w2), w.b2);
}

// Mean cross-entropy between softmax(logits) and the label rows.
template <Tensor T>
T classifier_loss(const ClassifierWeights<T>& w, const T& x, const T& y) {
  const double n = static_cast<double>(value_of(x).rows());
  return scale(sum_all(hadamard(y, log_softmax_rows(classifier_logits(w, x)))), -1.0 / n);
}

// Closed-form gradient of classifier_loss, valid when every label row sums to one.
// Expressed in primitive ops so that, on a tape, it is itself differentiable.
template <Tensor T>
ClassifierWeights<T> classifier_gradient(const ClassifierWeights<T>& w, const T& x, const T& y) {
  const double n = static_cast<double>(value_of(x).rows());
  const T h = tanh(add_row(matmul(x, w.w1), w.b1));
  const T logits = add_row(matmul(h, w.w2), w.b2);
  const T dlogits = scale(sub(softmax_rows(logits), y), 1.0 / n);
  const T dh = matmul_nt(dlogits, w.w2);
  const T dpre = hadamard(dh, add_scalar(scale(hadamard(h, h), -1.0), 1.0));
  return {matmul_tn(x, dpre), col_sums(dpre), matmul_tn(h, dlogits), col_sums(dlogits)};
}

inline std::vector<std::size_t> batch_indices(const RngStream& order, std::size_t step, std::size_t n,
                                              std::size_t batch) {
  RngStream r = order.derive(step);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = r.uniform_index(n);
  return idx;
}

// `steps` Adam iterations on the mean cross-entropy.
template <Tensor T>
ClassifierWeights<T> fit_classifier(const T& x, const T& y, const ClassifierWeights<T>& init, const ErmOptions& opts,
                                    const RngStream& order) {
  const std::size_t n = value_of(x).rows();
  if (n == 0) throw ProtocolError("solve_erm: empty training set");
  std::vector<T> params{init.w1, init.b1, init.w2, init.b2};
  AdamState<T> state;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    const ClassifierWeights<T> w{params[0], params[1], params[2], params[3]};
    ClassifierWeights<T> g;
    if (opts.batch > 0) {
      const auto idx = batch_indices(order, step, n, opts.batch);
      g = classifier_gradient(w, gather_rows(x, idx), gather_rows(y, idx));
    } else {
      g = classifier_gradient(w, x, y);
    }
    if constexpr (std::is_same_v<T, Matrix>) {
      if (!all_finite(g.w1) || !all_finite(g.b1) || !all_finite(g.w2) || !all_finite(g.b2)) {
        throw NumericError("solve_erm: non-finite loss gradient at step " + std::to_string(step));
      }
    }
    adam_step(params, std::vector<T>{g.w1, g.b1, g.w2, g.b2}, state, opts.adam);
  }
  return {params[0], params[1], params[2], params[3]};
}

// ERM on observed points plus points generated from `base` (skipped when base is empty).
// One template serves centralized MP, the FMP server, and the unrolled meta-training branch.
template <Tensor T>
ClassifierWeights<T> mp_fit(const T& observed, const T& base, const GeneratorWeights<T>& gw, const PointLayout& layout,
                            const ClassifierWeights<T>& init, const ErmOptions& opts, const RngStream& order) {
  if (value_of(observed).rows() == 0) throw ProtocolError("mp_fit: empty observed set");
  T train = observed;
  if (value_of(base).rows() > 0) {
    train = concat_rows(observed, normalize_labels(isab_generate(observed, base, gw), layout));
  }
  return fit_classifier(slice_cols(train, 0, layout.features), slice_cols(train, layout.label_offset(), layout.classes),
                        init, opts, order);
}

inline ModelParams solve_erm(const PointSet& train, const ModelParams& init, const ErmOptions& opts,
                             const RngStream& order = RngStream(0, 0)) {
  if (train.empty()) throw ProtocolError("solve_erm: empty training set");
  if (init.shape.features != train.layout().features || init.shape.classes != train.layout().classes) {
    throw ShapeError("solve_erm: model shape does not match point layout");
  }
  const auto w = fit_classifier(train.features(), train.labels(), unpack(init), opts, order);
  return pack(init.shape, w);
}

inline Matrix sample_base_set(const RngStream& draw, std::size_t n_prime, std::size_t width) {
  RngStream r = base_stream(draw);
  return sample_gaussian(r, n_prime, width);
}

// One martingale-posterior draw with an explicit initial model.
inline ModelParams draw_mp_sample(const PointSet& observed, const GeneratorParams& gp, std::size_t n_prime,
                                  const RngStream& rng, const ErmOptions& opts, const ModelParams& init) {
  if (!(observed.layout() == gp.layout)) throw ShapeError("draw_mp_sample: layout mismatch");
  if (observed.empty()) throw ProtocolError("draw_mp_sample: empty observed set");
  const Matrix base = sample_base_set(rng, n_prime, gp.layout.width());
  const auto w = mp_fit(observed.points(), base, gp.weights, gp.layout, unpack(init), opts, order_stream(rng));
  return pack(init.shape, w);
}

// One martingale-posterior draw: base set, init and minibatch order all come from `rng`.
inline ModelParams draw_mp_sample(const PointSet& observed, const GeneratorParams& gp, std::size_t n_prime,
                                  const RngStream& rng, const ErmOptions& opts) {
  return draw_mp_sample(observed, gp, n_prime, rng, opts,
                        init_classifier(classifier_shape(gp.layout, opts), init_stream(rng)));
}

// R draws, the r-th keyed by rng.derive(r); evaluated in parallel, collected in order.
inline PosteriorSamples draw_mp_samples(const PointSet& observed, const GeneratorParams& gp, std::size_t n_prime,
                                        std::size_t count, const RngStream& rng, const ErmOptions& opts,
                                        Provenance provenance = Provenance::MP, std::size_t workers = 0) {
  PosteriorSamples out;
  out.provenance = provenance;
  out.members.resize(count);
  out.seeds.resize(count);
  parallel_for(
      count,
      [&](std::size_t r) {
        const RngStream draw = rng.derive(r);
        out.members[r] = draw_mp_sample(observed, gp, n_prime, draw, opts);
        out.seeds[r] = draw.stream_id();
      },
      workers);
  return out;
}

inline Matrix predict_proba(const ModelParams& theta, const Matrix& features) {
  return softmax_rows(classifier_logits(unpack(theta), features));
}

// Mean of the members' softmax outputs, one row per feature row.
inline Matrix ensemble_predict(const PosteriorSamples& samples, const Matrix& features) {
  if (samples.members.empty()) throw ProtocolError("ensemble_predict: empty sample list");
  Matrix acc(features.rows(), samples.members.front().shape.classes);
  for (const auto& m : samples.members) {
    const Matrix p = predict_proba(m, features);
    require_same_shape(acc, p, "ensemble_predict");
    for (std::size_t i = 0; i < acc.size(); ++i) acc.values()[i] += p.values()[i];
  }
  return scale(acc, 1.0 / static_cast<double>(samples.members.size()));
}

inline std::vector<double> ensemble_predict(const PosteriorSamples& samples, std::span<const double> x) {
  const Matrix row(1, x.size(), std::vector<double>(x.begin(), x.end()));
  const Matrix p = ensemble_predict(samples, row);
  return {p.values().begin(), p.values().end()};
}

}  // namespace fmp
