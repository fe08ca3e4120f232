#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fmp/error.hpp"
#include "fmp/matrix.hpp"
#include "fmp/metatrain.hpp"
#include "fmp/rng.hpp"
#include "fmp/setattn.hpp"
#include "fmp/wire.hpp"

namespace fmp {

enum class PartitionKind : std::uint8_t { Homogeneous = 0, Dirichlet = 1 };

struct TaskSpec {
  std::size_t classes = 3;
  std::size_t features = 8;
  double center_scale = 3.0;
  double noise = 1.0;
  std::size_t n = 32;        // points per client
  std::size_t clients = 4;   // M
  PartitionKind partition = PartitionKind::Homogeneous;
  double alpha = 1.0;
  std::size_t heads = 4;

  PointLayout layout() const { return {features, classes, heads}; }
};

inline void validate(const TaskSpec& s) {
  if (s.classes < 2) throw ConfigError("task spec: need at least 2 classes");
  if (s.features == 0) throw ConfigError("task spec: d_feat must be positive");
  if (!(s.noise > 0.0) || !std::isfinite(s.noise)) throw ConfigError("task spec: noise must be positive");
  if (!(s.center_scale >= 0.0)) throw ConfigError("task spec: center scale must be non-negative");
  if (s.n == 0 || s.clients == 0) throw ConfigError("task spec: n and M must be positive");
  if (s.heads == 0) throw ConfigError("task spec: heads must be positive");
  if (s.partition == PartitionKind::Dirichlet && !(s.alpha > 0.0 && std::isfinite(s.alpha))) {
    throw ConfigError("task spec: Dirichlet alpha must be positive");
  }
}

struct FeatureDataset {
  Matrix features;
  std::vector<std::uint32_t> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
};

inline void validate(const FeatureDataset& ds) {
  if (ds.labels.empty()) throw RangeError("feature dataset is empty");
  if (ds.features.rows() != ds.labels.size()) throw ShapeError("feature dataset: rows do not match labels");
  if (ds.classes < 2) throw RangeError("feature dataset: need at least 2 classes");
  for (auto l : ds.labels) {
    if (l >= ds.classes) throw RangeError("label " + std::to_string(l) + " out of range [0, " + std::to_string(ds.classes) + ")");
  }
}

inline PointSet to_points(const FeatureDataset& ds, std::span<const std::size_t> index, const PointLayout& layout) {
  std::vector<std::uint32_t> labels;
  labels.reserve(index.size());
  for (auto i : index) labels.push_back(ds.labels[i]);
  return PointSet::encode(gather_rows(ds.features, index), labels, layout);
}

inline PointSet to_points(const FeatureDataset& ds, const PointLayout& layout) {
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return to_points(ds, all, layout);
}

// ---- partitioners ----

inline std::vector<std::vector<std::size_t>> homogeneous_shards(std::size_t n_points, std::size_t clients, RngStream rng) {
  if (clients == 0) throw ConfigError("partition: M must be positive");
  if (n_points < clients) throw ConfigError("partition: fewer points than clients");
  std::vector<std::size_t> order(n_points);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const std::size_t per = n_points / clients;
  std::vector<std::vector<std::size_t>> shards(clients);
  for (std::size_t m = 0; m < clients; ++m) {
    shards[m].assign(order.begin() + static_cast<std::ptrdiff_t>(m * per),
                     order.begin() + static_cast<std::ptrdiff_t>((m + 1) * per));
  }
  return shards;
}

inline std::vector<PointSet> partition_homogeneous(const FeatureDataset& ds, std::size_t clients, RngStream rng,
                                                   const PointLayout& layout) {
  validate(ds);
  std::vector<PointSet> out;
  for (const auto& shard : homogeneous_shards(ds.size(), clients, rng)) out.push_back(to_points(ds, shard, layout));
  return out;
}

inline std::vector<double> sample_dirichlet(RngStream& rng, std::size_t k, double alpha) {
  std::vector<double> p(k);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.gamma(alpha);
    total += v;
  }
  if (!(total > 0.0)) {
    // every gamma variate underflowed; all mass goes to one coordinate
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.uniform_index(k)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

inline std::vector<std::vector<std::size_t>> dirichlet_shards(std::span<const std::uint32_t> labels, std::size_t classes,
                                                              std::size_t clients, double alpha, RngStream rng) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("partition: Dirichlet alpha must be positive");
  if (clients == 0) throw ConfigError("partition: M must be positive");
  if (labels.size() < clients) throw ConfigError("partition: fewer points than clients");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(labels[i]).push_back(i);

  std::vector<std::vector<std::size_t>> shards(clients);
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].empty()) throw ConfigError("partition: class " + std::to_string(c) + " has no points");
    RngStream cr = rng.derive(c);
    const auto p = sample_dirichlet(cr, clients, alpha);
    for (std::size_t i : by_class[c]) {
      const double u = cr.uniform();
      double acc = 0.0;
      std::size_t m = 0;
      for (; m + 1 < clients; ++m) {
        acc += p[m];
        if (u < acc) break;
      }
      shards[m].push_back(i);
    }
  }

  RngStream repair = rng.derive(0xE3E3);
  for (auto& shard : shards) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(shards.begin(), shards.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    const std::size_t pick = repair.uniform_index(largest->size());
    shard.push_back((*largest)[pick]);
    largest->erase(largest->begin() + static_cast<std::ptrdiff_t>(pick));
  }
  for (auto& shard : shards) std::sort(shard.begin(), shard.end());
  return shards;
}

inline std::vector<PointSet> partition_dirichlet(const FeatureDataset& ds, std::size_t clients, double alpha,
                                                 RngStream rng, const PointLayout& layout) {
  validate(ds);
  std::vector<PointSet> out;
  for (const auto& shard : dirichlet_shards(ds.labels, ds.classes, clients, alpha, rng)) {
    out.push_back(to_points(ds, shard, layout));
  }
  return out;
}

// ---- synthetic Gaussian-mixture tasks ----

inline Matrix sample_centers(const TaskSpec& spec, RngStream rng) {
  return sample_gaussian(rng, spec.classes, spec.features, spec.center_scale);
}

// `count` points with uniformly drawn classes around the given centers.
inline FeatureDataset sample_mixture(const Matrix& centers, double noise, std::size_t count, RngStream rng) {
  FeatureDataset ds{Matrix(count, centers.cols()), std::vector<std::uint32_t>(count), centers.rows()};
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = static_cast<std::uint32_t>(rng.uniform_index(centers.rows()));
    ds.labels[i] = c;
    for (std::size_t j = 0; j < centers.cols(); ++j) ds.features(i, j) = centers(c, j) + noise * rng.normal();
  }
  return ds;
}

struct SyntheticTask {
  Task task;
  Matrix centers;
  FeatureDataset pooled;
};

inline std::vector<PointSet> partition(const FeatureDataset& ds, const TaskSpec& spec, RngStream rng) {
  if (spec.partition == PartitionKind::Homogeneous) return partition_homogeneous(ds, spec.clients, rng, spec.layout());
  return partition_dirichlet(ds, spec.clients, spec.alpha, rng, spec.layout());
}

inline SyntheticTask sample_synthetic_task(const TaskSpec& spec, RngStream rng, std::uint64_t id = 0) {
  validate(spec);
  SyntheticTask out;
  out.centers = sample_centers(spec, rng.derive(1));
  out.pooled = sample_mixture(out.centers, spec.noise, spec.n * spec.clients, rng.derive(2));
  out.task.id = id;
  out.task.clients = partition(out.pooled, spec, rng.derive(3));
  out.task.base_seed = rng.derive(4).next_u64();
  return out;
}

inline Task sample_task(const TaskSpec& spec, RngStream rng, std::uint64_t id = 0) {
  return sample_synthetic_task(spec, rng, id).task;
}

// K tasks, task i drawn from rng.derive(i) with id i.
inline std::vector<Task> sample_corpus(const TaskSpec& spec, std::size_t count, const RngStream& rng) {
  std::vector<Task> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_task(spec, rng.derive(i), i));
  return out;
}

// ---- FMPF feature files ----

inline constexpr std::uint16_t kFeatureFileVersion = 1;

inline wire::Bytes encode_feature_file(const FeatureDataset& ds) {
  validate(ds);
  if (ds.classes > 0xFFFF) throw RangeError("feature file: too many classes for u16 labels");
  wire::Writer w;
  w.magic("FMPF");
  w.u16(kFeatureFileVersion);
  w.u64(ds.size());
  w.u32(static_cast<std::uint32_t>(ds.features.cols()));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.f64s(ds.features.values());
  for (auto l : ds.labels) w.u16(static_cast<std::uint16_t>(l));
  return std::move(w).finish();
}

inline FeatureDataset decode_feature_file(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.check_crc();
  r.expect_magic("FMPF");
  if (r.u16() != kFeatureFileVersion) throw FormatError("unsupported feature file version", 4);
  const std::size_t header_end = 4 + 2 + 8 + 4 + 4;
  const std::uint64_t n = r.u64();
  const std::uint32_t d = r.u32();
  const std::uint32_t c = r.u32();
  if (n == 0) throw FormatError("feature file holds no rows", 6);
  if (d == 0) throw FormatError("feature file has zero feature width", 14);
  if (c < 2) throw FormatError("feature file needs at least 2 classes", 18);
  if (n > r.remaining() / (8ULL * d + 2)) throw FormatError("feature payload truncated", header_end);
  FeatureDataset ds;
  ds.classes = c;
  ds.features = Matrix(n, d, r.f64s(n * d));
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::uint16_t l = r.u16();
    if (l >= c) throw RangeError("label " + std::to_string(l) + " out of range at byte " + std::to_string(at));
    ds.labels[i] = l;
  }
  r.expect_end();
  return ds;
}

inline FeatureDataset load_feature_file(const std::string& path) { return decode_feature_file(wire::read_file(path)); }

inline void save_feature_file(const std::string& path, const FeatureDataset& ds) {
  wire::write_file(path, encode_feature_file(ds));
}

// Seeded split into (train, test); `train_fraction` of the shuffled rows go to train.
inline std::pair<FeatureDataset, FeatureDataset> split_dataset(const FeatureDataset& ds, double train_fraction,
                                                               RngStream rng) {
  validate(ds);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const auto cut = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(ds.size())));
  if (cut == 0 || cut >= ds.size()) throw ConfigError("split: both parts must be nonempty");
  auto take = [&](std::size_t from, std::size_t to) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(to));
    FeatureDataset part{gather_rows(ds.features, idx), {}, ds.classes};
    for (auto i : idx) part.labels.push_back(ds.labels[i]);
    return part;
  };
  return {take(0, cut), take(cut, ds.size())};
}

// ---- task corpora as checkpoints ----

namespace detail {
inline Matrix split_u64(std::uint64_t a, std::uint64_t b) {
  return Matrix(1, 4, {static_cast<double>(a >> 32), static_cast<double>(a & 0xFFFFFFFFULL), static_cast<double>(b >> 32),
                       static_cast<double>(b & 0xFFFFFFFFULL)});
}
inline std::uint64_t join_u64(double hi, double lo) {
  if (!(hi >= 0 && hi < 4294967296.0 && lo >= 0 && lo < 4294967296.0) || hi != std::floor(hi) || lo != std::floor(lo)) {
    throw FormatError("corrupt 64-bit field in task section", 0);
  }
  return (static_cast<std::uint64_t>(hi) << 32) | static_cast<std::uint64_t>(lo);
}
}  // namespace detail

// Sections: "corpus/layout" (1x3), then per task "task/<i>/meta" (id and base seed as 32-bit
// halves) and "task/<i>/client/<m>" (the client's points).
inline wire::Checkpoint corpus_to_checkpoint(std::span<const Task> corpus) {
  if (corpus.empty()) throw ConfigError("corpus is empty");
  wire::Checkpoint ck;
  const PointLayout layout = corpus.front().clients.front().layout();
  ck.put("corpus/layout", Matrix(1, 3, {static_cast<double>(layout.features), static_cast<double>(layout.classes),
                                        static_cast<double>(layout.heads)}));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::string prefix = "task/" + std::to_string(i);
    ck.put(prefix + "/meta", detail::split_u64(corpus[i].id, corpus[i].base_seed));
    for (std::size_t m = 0; m < corpus[i].clients.size(); ++m) {
      ck.put(prefix + "/client/" + std::to_string(m), corpus[i].clients[m].points());
    }
  }
  return ck;
}

inline std::vector<Task> corpus_from_checkpoint(const wire::Checkpoint& ck) {
  const Matrix& lm = ck.get("corpus/layout");
  if (lm.size() != 3) throw FormatError("section 'corpus/layout' must be 1x3", 0);
  const PointLayout layout{static_cast<std::size_t>(lm(0, 0)), static_cast<std::size_t>(lm(0, 1)),
                           static_cast<std::size_t>(lm(0, 2))};
  std::vector<Task> out;
  for (std::size_t i = 0; ck.has("task/" + std::to_string(i) + "/meta"); ++i) {
    const std::string prefix = "task/" + std::to_string(i);
    const Matrix& meta = ck.get(prefix + "/meta");
    if (meta.size() != 4) throw FormatError("section '" + prefix + "/meta' must be 1x4", 0);
    Task t;
    t.id = detail::join_u64(meta(0, 0), meta(0, 1));
    t.base_seed = detail::join_u64(meta(0, 2), meta(0, 3));
    for (std::size_t m = 0; ck.has(prefix + "/client/" + std::to_string(m)); ++m) {
      try {
        t.clients.emplace_back(ck.get(prefix + "/client/" + std::to_string(m)), layout);
      } catch (const ShapeError& e) {
        throw FormatError(prefix + ": " + e.what(), 0);
      }
    }
    validate(t);
    out.push_back(std::move(t));
  }
  if (out.empty()) throw FormatError("checkpoint holds no tasks", 0);
  return out;
}

}  // namespace fmp
