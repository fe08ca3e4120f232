#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "fmp/error.hpp"
#include "fmp/federated.hpp"
#include "fmp/optim.hpp"
#include "fmp/parallel.hpp"
#include "fmp/predictive.hpp"
#include "fmp/setattn.hpp"
#include "fmp/tape.hpp"
#include "fmp/wire.hpp"

namespace fmp {

// One meta-training task: a realization of client datasets plus the seed of its base set.
// Client m of the task is treated as client-id m.
struct Task {
  std::uint64_t id = 0;
  std::vector<PointSet> clients;
  std::uint64_t base_seed = 0;
};

enum class MetaNorm : std::uint8_t { L2 = 0, L1 = 1 };

struct MetaConfig {
  std::size_t epochs = 200;
  // Inner optimizer steps unrolled on the tape (both branches use this budget).
  std::size_t unroll_steps = 20;
  // A large epsilon keeps the unrolled Adam steps smooth in the embedder parameters.
  ErmOptions inner{.steps = 20, .batch = 0, .hidden = 16, .adam = {.lr = 0.1, .eps = 0.1}};
  AdamHyper outer{.lr = 1e-2};
  MetaNorm norm = MetaNorm::L2;
  // Outer learning rate follows a half-cosine from outer.lr down to 0 over the epochs.
  bool cosine_decay = false;
  // Pseudo-set size; 0 means the pooled size of the task.
  std::size_t n_prime = 0;
  std::size_t workers = 0;
};

inline void validate(const Task& t) {
  if (t.clients.empty()) throw ConfigError("task " + std::to_string(t.id) + " has no clients");
  for (const auto& c : t.clients) {
    if (!(c.layout() == t.clients.front().layout())) throw ShapeError("task clients disagree on layout");
    if (c.empty()) throw ProtocolError("task " + std::to_string(t.id) + " has an empty client");
  }
}

inline RngStream task_stream(const Task& t) { return RngStream(t.base_seed, t.id); }

inline PointSet pooled_data(const Task& t) {
  validate(t);
  return concat(std::span<const PointSet>(t.clients));
}

inline std::size_t pooled_size(const Task& t) {
  std::size_t n = 0;
  for (const auto& c : t.clients) n += c.n();
  return n;
}

inline std::size_t task_n_prime(const Task& t, const MetaConfig& cfg) {
  return cfg.n_prime == 0 ? pooled_size(t) : cfg.n_prime;
}

inline ErmOptions unrolled_options(const MetaConfig& cfg) {
  if (cfg.unroll_steps == 0) throw ConfigError("meta-training needs at least one unrolled step");
  ErmOptions o = cfg.inner;
  o.steps = cfg.unroll_steps;
  return o;
}

// Base set shared by the MP and FMP branches of a task.
inline PointSet sample_base_set_for_task(const Task& t, std::size_t n_prime, const PointLayout& layout) {
  return {sample_base_set(task_stream(t), n_prime, layout.width()), layout};
}

// Centralized target draw; constant with respect to the embedder.
inline ModelParams mp_target(const Task& t, const GeneratorParams& gp, const MetaConfig& cfg) {
  return draw_mp_sample(pooled_data(t), gp, task_n_prime(t, cfg), task_stream(t), unrolled_options(cfg));
}

inline std::vector<ClientState> task_clients(const Task& t) {
  std::vector<ClientState> out;
  for (std::size_t m = 0; m < t.clients.size(); ++m) {
    out.push_back({static_cast<std::uint32_t>(m), t.clients[m], task_stream(t).derive(1000 + m), task_stream(t)});
  }
  return out;
}

struct TaskLoss {
  double loss = 0.0;
  EmbedderWeights<Matrix> grad;
  ModelParams fmp_branch;
};

namespace detail {
inline Var parameter_distance(const ClassifierWeights<Var>& w, const ModelParams& target, MetaNorm norm) {
  const auto tw = unpack(target);
  const Var pieces[] = {w.w1, w.b1, w.w2, w.b2};
  const Matrix* targets[] = {&tw.w1, &tw.b1, &tw.w2, &tw.b2};
  Var total;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var diff = sub(pieces[i], lift_like(pieces[i], *targets[i]));
    const Var part = norm == MetaNorm::L2 ? sum_all(hadamard(diff, diff)) : sum_all(abs(diff));
    total = i == 0 ? part : add(total, part);
  }
  return norm == MetaNorm::L2 ? sqrt(total) : total;
}
}  // namespace detail

// ||theta_MP - theta_FMP|| for one task, with the FMP branch unrolled on a tape so the
// gradient with respect to every embedder tensor is returned alongside the value.
inline TaskLoss per_task_loss_and_grad(const Task& t, const EmbedderParams& phi, const GeneratorParams& gp,
                                       const MetaConfig& cfg, const ModelParams& target) {
  validate(t);
  const PointLayout& layout = gp.layout;
  if (!(phi.layout == layout) || !(t.clients.front().layout() == layout)) {
    throw ShapeError("per_task_loss: layout mismatch");
  }
  const ErmOptions opts = unrolled_options(cfg);
  const RngStream stream = task_stream(t);

  Tape tape;
  const EmbedderWeights<Var> w = lift(tape, phi.weights, true);
  std::vector<Var> compressed;
  for (const auto& client : t.clients) {
    compressed.push_back(pma_compress(tape.constant(client.points()), w, phi.mode, layout));
  }
  const Var z = concat_rows(std::span<const Var>(compressed));
  const Var base = tape.constant(sample_base_set(stream, task_n_prime(t, cfg), layout.width()));
  const GeneratorWeights<Var> gw = lift(tape, gp.weights, false);
  const auto init = unpack(init_classifier(classifier_shape(layout, opts), init_stream(stream)));
  const ClassifierWeights<Var> init_v{tape.constant(init.w1), tape.constant(init.b1), tape.constant(init.w2),
                                      tape.constant(init.b2)};
  const ClassifierWeights<Var> theta = mp_fit(z, base, gw, layout, init_v, opts, order_stream(stream));
  const Var loss = detail::parameter_distance(theta, target, cfg.norm);

  TaskLoss out;
  out.loss = scalar(loss);
  out.fmp_branch = pack(target.shape, {theta.w1.value(), theta.b1.value(), theta.w2.value(), theta.b2.value()});
  out.grad = phi.weights;
  if (loss.requires_grad()) {
    tape.backward(loss);
    std::vector<Matrix> grads;
    for_each_tensor(w, "", [&](const std::string&, const Var& v) { grads.push_back(tape.grad(v)); });
    std::size_t i = 0;
    for_each_tensor(out.grad, "", [&](const std::string&, Matrix& m) { m = std::move(grads[i++]); });
  } else {
    for_each_tensor(out.grad, "", [](const std::string&, Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  }
  return out;
}

inline double per_task_loss(const Task& t, const EmbedderParams& phi, const GeneratorParams& gp,
                            const MetaConfig& cfg) {
  return per_task_loss_and_grad(t, phi, gp, cfg, mp_target(t, gp, cfg)).loss;
}

inline std::vector<std::size_t> canonical_task_order(std::span<const Task> corpus) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return corpus[a].id < corpus[b].id; });
  return order;
}

inline std::vector<ModelParams> mp_targets(std::span<const Task> corpus, const GeneratorParams& gp,
                                           const MetaConfig& cfg) {
  std::vector<ModelParams> out(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { out[i] = mp_target(corpus[i], gp, cfg); }, cfg.workers);
  return out;
}

inline double mean_task_loss(std::span<const Task> corpus, const EmbedderParams& phi, const GeneratorParams& gp,
                             const MetaConfig& cfg, std::span<const ModelParams> targets) {
  std::vector<double> losses(corpus.size());
  parallel_for(
      corpus.size(),
      [&](std::size_t i) { losses[i] = per_task_loss_and_grad(corpus[i], phi, gp, cfg, targets[i]).loss; },
      cfg.workers);
  double s = 0.0;
  for (std::size_t i : canonical_task_order(corpus)) s += losses[i];
  return s / static_cast<double>(corpus.size());
}

struct MetaTrainResult {
  EmbedderParams phi;
  // Mean per-task loss evaluated at the start of each epoch, before its update.
  std::vector<double> trace;
};

namespace detail {
// Mean loss and mean gradient over a batch of tasks, accumulated in task-id order.
inline std::pair<double, std::vector<Matrix>> batch_loss_and_grad(std::span<const Task> tasks,
                                                                  std::span<const ModelParams> targets,
                                                                  const EmbedderParams& phi, const GeneratorParams& gp,
                                                                  const MetaConfig& cfg) {
  std::vector<TaskLoss> slots(tasks.size());
  parallel_for(
      tasks.size(), [&](std::size_t i) { slots[i] = per_task_loss_and_grad(tasks[i], phi, gp, cfg, targets[i]); },
      cfg.workers);
  double loss = 0.0;
  std::vector<Matrix> grad_sum;
  for (std::size_t i : canonical_task_order(tasks)) {
    loss += slots[i].loss;
    std::size_t k = 0;
    for_each_tensor(slots[i].grad, "", [&](const std::string&, const Matrix& g) {
      if (grad_sum.size() <= k) {
        grad_sum.push_back(g);
      } else {
        grad_sum[k] = add(grad_sum[k], g);
      }
      ++k;
    });
  }
  const double inv_k = 1.0 / static_cast<double>(tasks.size());
  for (auto& g : grad_sum) g = scale(g, inv_k);
  return {loss * inv_k, std::move(grad_sum)};
}

inline void outer_step(EmbedderParams& phi, const std::vector<Matrix>& grad, AdamState<Matrix>& state,
                       const MetaConfig& cfg, std::size_t epoch) {
  std::vector<Matrix> params;
  for_each_tensor(phi.weights, "", [&](const std::string&, const Matrix& m) { params.push_back(m); });
  AdamHyper hyper = cfg.outer;
  if (cfg.cosine_decay) {
    hyper.lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(cfg.epochs)));
  }
  adam_step(params, grad, state, hyper);
  std::size_t k = 0;
  for_each_tensor(phi.weights, "", [&](const std::string&, Matrix& m) { m = std::move(params[k++]); });
}

template <class F>
auto at_epoch(std::size_t epoch, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError("meta_train: diverged at epoch " + std::to_string(epoch) + ": " + e.what());
  }
}
}  // namespace detail

// Full-batch outer Adam on (1/K) sum_i loss_i(phi). Only the embedder changes.
inline MetaTrainResult meta_train(std::span<const Task> corpus, const EmbedderParams& phi0, const GeneratorParams& gp,
                                  const MetaConfig& cfg) {
  if (corpus.empty()) throw ConfigError("meta_train: empty corpus");
  MetaTrainResult result{phi0, {}};
  if (cfg.epochs == 0) return result;
  for (const auto& t : corpus) validate(t);

  const auto targets = mp_targets(corpus, gp, cfg);
  AdamState<Matrix> state;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto [loss, grad] =
        detail::at_epoch(epoch, [&] { return detail::batch_loss_and_grad(corpus, targets, result.phi, gp, cfg); });
    if (!std::isfinite(loss)) throw NumericError("meta_train: loss diverged at epoch " + std::to_string(epoch));
    result.trace.push_back(loss);
    detail::outer_step(result.phi, grad, state, cfg, epoch);
  }
  return result;
}

// Same outer loop, but epoch e trains on the fresh batch sampler(e).
inline MetaTrainResult meta_train(const std::function<std::vector<Task>(std::size_t)>& sampler,
                                  const EmbedderParams& phi0, const GeneratorParams& gp, const MetaConfig& cfg) {
  MetaTrainResult result{phi0, {}};
  AdamState<Matrix> state;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto tasks = sampler(epoch);
    if (tasks.empty()) throw ConfigError("meta_train: empty task batch at epoch " + std::to_string(epoch));
    for (const auto& t : tasks) validate(t);
    auto [loss, grad] = detail::at_epoch(epoch, [&] {
      const auto targets = mp_targets(tasks, gp, cfg);
      return detail::batch_loss_and_grad(tasks, targets, result.phi, gp, cfg);
    });
    if (!std::isfinite(loss)) throw NumericError("meta_train: loss diverged at epoch " + std::to_string(epoch));
    result.trace.push_back(loss);
    detail::outer_step(result.phi, grad, state, cfg, epoch);
  }
  return result;
}

// ---- checkpoints and traces ----

namespace detail {
inline Matrix layout_section(const PointLayout& l) {
  return Matrix(1, 3, {static_cast<double>(l.features), static_cast<double>(l.classes), static_cast<double>(l.heads)});
}

inline PointLayout read_layout(const wire::Checkpoint& ck, const std::string& name) {
  const Matrix& m = ck.get(name);
  if (m.rows() != 1 || m.cols() != 3) throw FormatError("section '" + name + "' must be 1x3", 0);
  auto count = [&](double v) {
    if (!(v >= 1.0) || v != std::floor(v) || v > 1e6) throw FormatError("section '" + name + "' holds a bad count", 0);
    return static_cast<std::size_t>(v);
  };
  return {count(m(0, 0)), count(m(0, 1)), count(m(0, 2))};
}

template <class W>
void put_tensors(wire::Checkpoint& ck, const std::string& prefix, const W& w) {
  for_each_tensor(w, prefix, [&](const std::string& name, const Matrix& m) { ck.put(name, m); });
}

template <class W>
void get_tensors(const wire::Checkpoint& ck, const std::string& prefix, W& w) {
  for_each_tensor(w, prefix, [&](const std::string& name, Matrix& m) {
    const Matrix& src = ck.get(name);
    if (!same_shape(src, m)) {
      throw FormatError("section '" + name + "' has shape " + shape_str(src) + ", expected " + shape_str(m), 0);
    }
    m = src;
  });
}
}  // namespace detail

inline void add_to_checkpoint(wire::Checkpoint& ck, const EmbedderParams& phi) {
  ck.put("phi/layout", detail::layout_section(phi.layout));
  ck.put("phi/mode", Matrix(1, 1, static_cast<double>(phi.mode == EmbedderMode::Identity ? 1 : 0)));
  if (phi.mode == EmbedderMode::Attention) detail::put_tensors(ck, "phi/", phi.weights);
}

inline EmbedderParams embedder_from_checkpoint(const wire::Checkpoint& ck) {
  const PointLayout layout = detail::read_layout(ck, "phi/layout");
  if (ck.get("phi/mode").size() != 1) throw FormatError("section 'phi/mode' must be 1x1", 0);
  if (ck.get("phi/mode")(0, 0) == 1.0) return identity_embedder(layout);
  const std::size_t seeds = ck.get("phi/seeds").rows();
  if (seeds == 0) throw FormatError("embedder checkpoint has no seed vectors", 0);
  EmbedderParams phi = init_embedder(layout, seeds, RngStream(0, 0));
  detail::get_tensors(ck, "phi/", phi.weights);
  return phi;
}

inline void add_to_checkpoint(wire::Checkpoint& ck, const GeneratorParams& gp) {
  ck.put("gp/layout", detail::layout_section(gp.layout));
  detail::put_tensors(ck, "gp/", gp.weights);
}

inline GeneratorParams generator_from_checkpoint(const wire::Checkpoint& ck) {
  GeneratorParams gp = make_generator(detail::read_layout(ck, "gp/layout"), RngStream(0, 0));
  detail::get_tensors(ck, "gp/", gp.weights);
  return gp;
}

// Stores draws as one R x P matrix plus a 1x3 shape row.
inline void add_to_checkpoint(wire::Checkpoint& ck, const PosteriorSamples& samples, const std::string& name = "theta") {
  if (samples.members.empty()) throw ProtocolError("checkpoint: empty sample list");
  const auto& shape = samples.members.front().shape;
  Matrix draws(samples.size(), shape.parameter_count());
  for (std::size_t r = 0; r < samples.size(); ++r) {
    if (!(samples.members[r].shape == shape)) throw ShapeError("checkpoint: mixed model shapes");
    std::copy(samples.members[r].values.begin(), samples.members[r].values.end(), draws.row(r).begin());
  }
  ck.put(name + "/shape", Matrix(1, 3, {static_cast<double>(shape.features), static_cast<double>(shape.hidden),
                                        static_cast<double>(shape.classes)}));
  ck.put(name + "/draws", std::move(draws));
}

inline PosteriorSamples samples_from_checkpoint(const wire::Checkpoint& ck, const std::string& name = "theta") {
  const Matrix& sm = ck.get(name + "/shape");
  if (sm.size() != 3) throw FormatError("section '" + name + "/shape' must be 1x3", 0);
  const ClassifierShape shape{static_cast<std::size_t>(sm(0, 0)), static_cast<std::size_t>(sm(0, 1)),
                              static_cast<std::size_t>(sm(0, 2))};
  const Matrix& draws = ck.get(name + "/draws");
  if (draws.cols() != shape.parameter_count()) throw FormatError("draw width does not match model shape", 0);
  PosteriorSamples out;
  for (std::size_t r = 0; r < draws.rows(); ++r) {
    out.members.push_back({shape, std::vector<double>(draws.row(r).begin(), draws.row(r).end())});
    out.seeds.push_back(r);
  }
  return out;
}

inline std::string trace_csv(std::span<const double> trace) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < trace.size(); ++e) out << e << ',' << trace[e] << '\n';
  return out.str();
}

}  // namespace fmp
