#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmp/data.hpp"
#include "fmp/error.hpp"
#include "fmp/federated.hpp"
#include "fmp/matrix.hpp"
#include "fmp/metatrain.hpp"
#include "fmp/parallel.hpp"
#include "fmp/predictive.hpp"
#include "fmp/wire.hpp"

namespace fmp {

// ---- metrics ----

struct PredictionBatch {
  Matrix probs;
  std::vector<std::uint32_t> labels;
};

inline void validate(const PredictionBatch& b) {
  if (b.probs.rows() != b.labels.size()) throw ShapeError("prediction batch: rows do not match labels");
  for (std::size_t i = 0; i < b.probs.rows(); ++i) {
    double s = 0.0;
    for (double p : b.probs.row(i)) s += p;
    if (std::abs(s - 1.0) > 1e-9) throw NumericError("prediction batch: row " + std::to_string(i) + " does not sum to 1");
    if (b.labels[i] >= b.probs.cols()) throw RangeError("prediction batch: label out of range");
  }
}

inline std::size_t argmax_row(const Matrix& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

inline double accuracy(const PredictionBatch& b) {
  validate(b);
  if (b.labels.empty()) throw ProtocolError("accuracy: empty batch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < b.labels.size(); ++i) hit += argmax_row(b.probs, i) == b.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(b.labels.size());
}

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  double confidence = 0.0;  // mean max-probability of the bin's rows, 0 when empty
  double accuracy = 0.0;
  std::size_t count = 0;
};

// Bin k covers (k/B, (k+1)/B].
inline std::size_t confidence_bin(double conf, std::size_t bins) {
  const double b = static_cast<double>(bins);
  auto edge = [&](std::size_t k) { return static_cast<double>(k) / b; };
  auto k = static_cast<std::size_t>(std::clamp(std::ceil(conf * b) - 1.0, 0.0, b - 1.0));
  while (k > 0 && conf <= edge(k)) --k;
  while (k + 1 < bins && conf > edge(k + 1)) ++k;
  return k;
}

inline std::vector<ReliabilityBin> reliability_data(const PredictionBatch& b, std::size_t bins = 15) {
  if (bins == 0) throw ConfigError("reliability: need at least one bin");
  validate(b);
  std::vector<ReliabilityBin> out(bins);
  std::vector<double> conf_sum(bins, 0.0), hit(bins, 0.0);
  for (std::size_t k = 0; k < bins; ++k) {
    out[k].lower = static_cast<double>(k) / static_cast<double>(bins);
    out[k].upper = static_cast<double>(k + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    const std::size_t pred = argmax_row(b.probs, i);
    const double conf = b.probs(i, pred);
    const std::size_t k = confidence_bin(conf, bins);
    ++out[k].count;
    conf_sum[k] += conf;
    hit[k] += pred == b.labels[i] ? 1.0 : 0.0;
  }
  for (std::size_t k = 0; k < bins; ++k) {
    if (out[k].count == 0) continue;
    out[k].confidence = conf_sum[k] / static_cast<double>(out[k].count);
    out[k].accuracy = hit[k] / static_cast<double>(out[k].count);
  }
  return out;
}

inline double ece_from_reliability(std::span<const ReliabilityBin> table) {
  std::size_t n = 0;
  for (const auto& r : table) n += r.count;
  if (n == 0) return 0.0;
  double e = 0.0;
  for (const auto& r : table) {
    if (r.count == 0) continue;
    e += static_cast<double>(r.count) / static_cast<double>(n) * std::abs(r.accuracy - r.confidence);
  }
  return e;
}

inline double ece(const PredictionBatch& b, std::size_t bins = 15) {
  return ece_from_reliability(reliability_data(b, bins));
}

// ---- experiment configuration ----

inline const std::vector<std::string>& protocol_names() {
  static const std::vector<std::string> names{"LANN", "LMP", "ANN", "MP", "CANN", "CFMP", "FMP"};
  return names;
}

struct ExperimentConfig {
  std::string name = "synthetic";
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::string> protocols = protocol_names();
  std::string out = "out";
  std::size_t ece_bins = 15;
  bool timing = false;
  std::size_t workers = 1;
  std::size_t test_size = 1000;

  TaskSpec task{.clients = 8};
  std::string feature_file;  // empty: synthetic tasks
  double train_fraction = 0.8;

  std::size_t draws = 16;  // R
  std::size_t n_prime = 0; // 0: size of the observed set
  std::uint64_t generator_seed = 0;
  ErmOptions erm{};

  std::size_t summary_points = 8;  // s
  std::string embedder_checkpoint;
  std::size_t meta_tasks = 16;
  bool fresh_tasks = true;
  std::uint64_t meta_seed = 0;
  MetaConfig meta{};
};

namespace detail {
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + raw + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
  if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + raw + "'");
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& raw) {
  return raw;
}
}  // namespace detail

inline std::vector<std::string> parse_protocols(const std::string& list) {
  auto items = detail::split_list(list);
  if (items.empty()) throw ConfigError("protocol list is empty");
  std::set<std::string> seen;
  for (auto& p : items) {
    std::transform(p.begin(), p.end(), p.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (std::find(protocol_names().begin(), protocol_names().end(), p) == protocol_names().end()) {
      throw ConfigError("unknown protocol '" + p + "'");
    }
    if (!seen.insert(p).second) throw ConfigError("protocol '" + p + "' listed twice");
  }
  return items;
}

// "homog" selects the homogeneous split, a positive real selects Dirichlet(alpha).
inline void apply_alpha(TaskSpec& spec, const std::string& alpha) {
  if (alpha == "homog" || alpha == "homogeneous") {
    spec.partition = PartitionKind::Homogeneous;
    return;
  }
  const double a = detail::parse_value<double>("alpha", alpha);
  if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("alpha must be positive or 'homog'");
  spec.partition = PartitionKind::Dirichlet;
  spec.alpha = a;
}

inline std::string alpha_tag(const TaskSpec& spec) {
  if (spec.partition == PartitionKind::Homogeneous) return "homog";
  std::ostringstream s;
  s << spec.alpha;
  return s.str();
}

inline void validate(const ExperimentConfig& cfg) {
  validate(cfg.task);
  if (cfg.seeds.empty()) throw ConfigError("no seeds configured");
  if (cfg.protocols.empty()) throw ConfigError("no protocols selected");
  if (cfg.ece_bins == 0) throw ConfigError("ece_bins must be positive");
  if (cfg.draws == 0) throw ConfigError("draws must be positive");
  const bool needs_local_mp = std::find(cfg.protocols.begin(), cfg.protocols.end(), "LMP") != cfg.protocols.end() ||
                              std::find(cfg.protocols.begin(), cfg.protocols.end(), "CFMP") != cfg.protocols.end();
  if (needs_local_mp && cfg.draws < 2) throw ConfigError("LMP and CFMP need draws >= 2");
  if (cfg.summary_points == 0) throw ConfigError("summary_points must be positive");
  if (cfg.feature_file.empty() && cfg.test_size == 0) throw ConfigError("test_size must be positive");
  if (!cfg.feature_file.empty() && !std::filesystem::exists(cfg.feature_file)) {
    throw ConfigError("feature file '" + cfg.feature_file + "' does not exist");
  }
  if (!cfg.embedder_checkpoint.empty() && !std::filesystem::exists(cfg.embedder_checkpoint)) {
    throw ConfigError("embedder checkpoint '" + cfg.embedder_checkpoint + "' does not exist");
  }
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
}

// Reads the key-value config (INI sections). Unknown keys are rejected.
inline ExperimentConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  auto bind = [&](const std::string& key, auto& field) {
    using T = std::remove_reference_t<decltype(field)>;
    setters[key] = [&field, key](const std::string& raw) { field = detail::parse_value<T>(key, raw); };
  };
  bind("experiment.name", cfg.name);
  setters["experiment.seeds"] = [&](const std::string& raw) {
    cfg.seeds.clear();
    for (const auto& s : detail::split_list(raw)) cfg.seeds.push_back(detail::parse_value<std::uint64_t>("seeds", s));
  };
  setters["experiment.protocols"] = [&](const std::string& raw) { cfg.protocols = parse_protocols(raw); };
  bind("experiment.out", cfg.out);
  bind("experiment.ece_bins", cfg.ece_bins);
  bind("experiment.timing", cfg.timing);
  bind("experiment.workers", cfg.workers);
  bind("experiment.test_size", cfg.test_size);

  bind("task.classes", cfg.task.classes);
  bind("task.features", cfg.task.features);
  bind("task.center_scale", cfg.task.center_scale);
  bind("task.noise", cfg.task.noise);
  bind("task.n", cfg.task.n);
  bind("task.clients", cfg.task.clients);
  bind("task.heads", cfg.task.heads);
  setters["task.alpha"] = [&](const std::string& raw) { apply_alpha(cfg.task, raw); };
  bind("task.feature_file", cfg.feature_file);
  bind("task.train_fraction", cfg.train_fraction);

  bind("mp.draws", cfg.draws);
  bind("mp.n_prime", cfg.n_prime);
  bind("mp.generator_seed", cfg.generator_seed);

  bind("erm.steps", cfg.erm.steps);
  bind("erm.lr", cfg.erm.adam.lr);
  bind("erm.eps", cfg.erm.adam.eps);
  bind("erm.batch", cfg.erm.batch);
  bind("erm.hidden", cfg.erm.hidden);

  bind("fmp.summary_points", cfg.summary_points);
  bind("fmp.checkpoint", cfg.embedder_checkpoint);
  bind("fmp.meta_tasks", cfg.meta_tasks);
  bind("fmp.meta_seed", cfg.meta_seed);
  bind("fmp.fresh_tasks", cfg.fresh_tasks);
  bind("fmp.meta_epochs", cfg.meta.epochs);
  bind("fmp.unroll_steps", cfg.meta.unroll_steps);
  bind("fmp.outer_lr", cfg.meta.outer.lr);
  bind("fmp.inner_lr", cfg.meta.inner.adam.lr);
  bind("fmp.inner_eps", cfg.meta.inner.adam.eps);
  bind("fmp.cosine_decay", cfg.meta.cosine_decay);
  setters["fmp.norm"] = [&](const std::string& raw) {
    if (raw == "l2" || raw == "L2") cfg.meta.norm = MetaNorm::L2;
    else if (raw == "l1" || raw == "L1") cfg.meta.norm = MetaNorm::L1;
    else throw ConfigError("fmp.norm must be l2 or l1");
  };

  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      auto it = setters.find(full);
      if (it == setters.end()) throw ConfigError("config: unknown key '" + full + "'");
      it->second(value.data());
    }
  }
  cfg.meta.inner.hidden = cfg.erm.hidden;
  cfg.meta.n_prime = cfg.n_prime;
  cfg.meta.workers = 1;
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

// ---- experiment ----

struct ReportRow {
  std::string protocol;
  std::string dataset;
  std::string alpha;
  double acc = 0.0;
  double ece = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> wall_time;
};

struct ReliabilityRecord {
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<ReliabilityBin> bins;
};

struct UploadDump {
  std::vector<CompressedUpload> compressed;
  std::vector<SampleUpload> samples;
};

struct ExperimentResult {
  std::vector<ReportRow> rows;
  std::vector<ReliabilityRecord> reliability;
  std::vector<double> meta_trace;
  std::optional<double> meta_heldout_initial;
  std::optional<double> meta_heldout_final;
  EmbedderParams phi;
  GeneratorParams gp;
  UploadDump uploads;  // client messages of the first seed
};

// Training clients and test set of one evaluation seed.
struct EvalData {
  std::vector<PointSet> clients;
  FeatureDataset test;
};

inline GeneratorParams experiment_generator(const ExperimentConfig& cfg) {
  return make_generator(cfg.task.layout(), RngStream(cfg.generator_seed, 0x6E6E));
}

// A task built from a fixed feature dataset: M*n rows drawn without replacement, then partitioned.
inline Task feature_task(const FeatureDataset& ds, const TaskSpec& spec, RngStream rng, std::uint64_t id) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream pick = rng.derive(1);
  pick.shuffle(order);
  order.resize(std::min(order.size(), spec.n * spec.clients));
  FeatureDataset sub{gather_rows(ds.features, order), {}, ds.classes};
  for (auto i : order) sub.labels.push_back(ds.labels[i]);
  Task t;
  t.id = id;
  t.clients = partition(sub, spec, rng.derive(2));
  t.base_seed = rng.derive(3).next_u64();
  return t;
}

// K meta-training tasks. With fresh_tasks every epoch gets its own batch; otherwise every
// epoch reuses batch 0. Task ids are unique across batches.
inline std::vector<Task> meta_batch(const ExperimentConfig& cfg, std::size_t epoch) {
  const RngStream root = RngStream(cfg.meta_seed, 0xC0C0).derive(cfg.fresh_tasks ? epoch : 0);
  const std::uint64_t first = (cfg.fresh_tasks ? epoch : 0) * cfg.meta_tasks;
  std::vector<Task> out;
  if (cfg.feature_file.empty()) {
    for (std::size_t i = 0; i < cfg.meta_tasks; ++i) out.push_back(sample_task(cfg.task, root.derive(i), first + i));
    return out;
  }
  const auto ds = load_feature_file(cfg.feature_file);
  const auto train = split_dataset(ds, cfg.train_fraction, RngStream(cfg.meta_seed, 0xF00)).first;
  for (std::size_t i = 0; i < cfg.meta_tasks; ++i) out.push_back(feature_task(train, cfg.task, root.derive(i), first + i));
  return out;
}

inline EvalData eval_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RngStream root(seed, 0);
  EvalData d;
  if (cfg.feature_file.empty()) {
    const auto st = sample_synthetic_task(cfg.task, root.derive(1));
    d.clients = st.task.clients;
    d.test = sample_mixture(st.centers, cfg.task.noise, cfg.test_size, root.derive(2));
    return d;
  }
  const auto ds = load_feature_file(cfg.feature_file);
  if (ds.features.cols() != cfg.task.features || ds.classes != cfg.task.classes) {
    throw ConfigError("feature file shape does not match [task] features/classes");
  }
  auto [train, test] = split_dataset(ds, cfg.train_fraction, root.derive(1));
  d.clients = partition(train, cfg.task, root.derive(3));
  d.test = std::move(test);
  return d;
}

inline EmbedderParams train_embedder(const ExperimentConfig& cfg, const GeneratorParams& gp, ExperimentResult* result) {
  if (!cfg.embedder_checkpoint.empty()) {
    auto phi = embedder_from_checkpoint(wire::decode_checkpoint(wire::read_file(cfg.embedder_checkpoint)));
    if (!(phi.layout == gp.layout)) throw ConfigError("embedder checkpoint layout does not match the task");
    return phi;
  }
  const EmbedderParams phi0 = init_embedder(gp.layout, cfg.summary_points, RngStream(cfg.meta_seed, 0xF1F1));
  if (cfg.meta.epochs == 0) return phi0;
  MetaTrainResult trained;
  if (cfg.fresh_tasks) {
    trained = meta_train([&](std::size_t e) { return meta_batch(cfg, e); }, phi0, gp, cfg.meta);
  } else {
    const auto corpus = meta_batch(cfg, 0);
    trained = meta_train(corpus, phi0, gp, cfg.meta);
  }
  if (result != nullptr) {
    // held-out batch: the one following the last training epoch
    auto probe = cfg;
    probe.fresh_tasks = true;
    const auto heldout = meta_batch(probe, cfg.meta.epochs + 1);
    const auto targets = mp_targets(heldout, gp, cfg.meta);
    result->meta_trace = trained.trace;
    result->meta_heldout_initial = mean_task_loss(heldout, phi0, gp, cfg.meta, targets);
    result->meta_heldout_final = mean_task_loss(heldout, trained.phi, gp, cfg.meta, targets);
  }
  return trained.phi;
}

namespace detail {
inline PredictionBatch stacked_batch(const std::vector<Matrix>& probs, const FeatureDataset& test) {
  PredictionBatch b;
  b.probs = concat_rows(std::span<const Matrix>(probs));
  for (std::size_t i = 0; i < probs.size(); ++i) b.labels.insert(b.labels.end(), test.labels.begin(), test.labels.end());
  return b;
}

inline PosteriorSamples single(const ModelParams& m, Provenance p) {
  PosteriorSamples s;
  s.provenance = p;
  s.members.push_back(m);
  s.seeds.push_back(0);
  return s;
}
}  // namespace detail

// Runs every selected protocol for one seed. `phi` is the (already meta-trained) embedder.
inline std::vector<std::pair<ReportRow, ReliabilityRecord>> run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                                                     const GeneratorParams& gp,
                                                                     const EmbedderParams& phi,
                                                                     UploadDump* dump = nullptr) {
  const RngStream root(seed, 0);
  const PointLayout layout = cfg.task.layout();
  EvalData data;
  try {
    data = eval_data(cfg, seed);
  } catch (const Error& e) {
    throw Error(std::string("stage data: ") + e.what());
  }
  std::vector<ClientState> clients;
  for (std::size_t m = 0; m < data.clients.size(); ++m) {
    clients.push_back({static_cast<std::uint32_t>(m), data.clients[m], root.derive(100 + m), root.derive(99)});
  }
  const PointSet pooled = concat(std::span<const PointSet>(data.clients));
  const std::size_t n_prime = cfg.n_prime == 0 ? pooled.n() : cfg.n_prime;
  const RngStream draw_rng = root.derive(7);
  const Matrix& x_test = data.test.features;

  std::optional<std::vector<SampleUpload>> ann_uploads, mp_uploads;
  auto local_ann = [&]() -> const std::vector<SampleUpload>& {
    if (!ann_uploads) {
      ann_uploads.emplace();
      for (const auto& c : clients) ann_uploads->push_back(local_ann_upload(c, cfg.erm));
    }
    return *ann_uploads;
  };
  auto local_mp = [&]() -> const std::vector<SampleUpload>& {
    if (!mp_uploads) {
      mp_uploads.emplace();
      for (const auto& c : clients) {
        const std::size_t np = cfg.n_prime == 0 ? c.data.n() : cfg.n_prime;
        mp_uploads->push_back(local_mp_upload(c, gp, cfg.draws, np, cfg.erm, 1));
      }
    }
    return *mp_uploads;
  };

  std::vector<std::pair<ReportRow, ReliabilityRecord>> out;
  for (const auto& protocol : cfg.protocols) {
    const auto start = std::chrono::steady_clock::now();
    PredictionBatch batch;
    std::string stage = "fit";
    try {
      if (protocol == "LANN" || protocol == "LMP") {
        const auto& ups = protocol == "LANN" ? local_ann() : local_mp();
        stage = "evaluate";
        std::vector<Matrix> probs;
        for (const auto& u : ups) probs.push_back(ensemble_predict(u.draws, x_test));
        batch = detail::stacked_batch(probs, data.test);
      } else {
        PosteriorSamples samples;
        if (protocol == "ANN") {
          samples = detail::single(draw_mp_sample(pooled, gp, 0, draw_rng.derive(0), cfg.erm), Provenance::ANN);
        } else if (protocol == "MP") {
          samples = draw_mp_samples(pooled, gp, n_prime, cfg.draws, draw_rng, cfg.erm, Provenance::MP, 1);
        } else if (protocol == "CANN") {
          samples = detail::single(cann_average(local_ann()), Provenance::CANN);
        } else if (protocol == "CFMP") {
          samples = cfmp_aggregate_all(local_mp());
          if (dump != nullptr) dump->samples = local_mp();
        } else if (protocol == "FMP") {
          stage = "compress";
          std::vector<CompressedUpload> uploads;
          for (const auto& c : clients) uploads.push_back(client_compress_upload(c, phi));
          if (dump != nullptr) dump->compressed = uploads;
          stage = "fit";
          samples = fmp_samples(uploads, gp, n_prime, cfg.draws, draw_rng, cfg.erm, 1);
        }
        stage = "evaluate";
        batch.probs = ensemble_predict(samples, x_test);
        batch.labels = data.test.labels;
      }
    } catch (const Error& e) {
      throw Error("protocol " + protocol + ", stage " + stage + ": " + e.what());
    }
    ReportRow row;
    row.protocol = protocol;
    row.dataset = cfg.name;
    row.alpha = alpha_tag(cfg.task);
    row.seed = seed;
    ReliabilityRecord rel{protocol, seed, reliability_data(batch, cfg.ece_bins)};
    row.acc = accuracy(batch);
    row.ece = ece_from_reliability(rel.bins);
    if (cfg.timing) row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.emplace_back(std::move(row), std::move(rel));
  }
  return out;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentResult result;
  result.gp = experiment_generator(cfg);
  const bool needs_phi = std::find(cfg.protocols.begin(), cfg.protocols.end(), "FMP") != cfg.protocols.end();
  if (needs_phi) {
    try {
      result.phi = train_embedder(cfg, result.gp, &result);
    } catch (const Error& e) {
      throw Error(std::string("protocol FMP, stage meta-train: ") + e.what());
    }
  }
  std::vector<std::vector<std::pair<ReportRow, ReliabilityRecord>>> per_seed(cfg.seeds.size());
  parallel_for(
      cfg.seeds.size(),
      [&](std::size_t i) { per_seed[i] = run_seed(cfg, cfg.seeds[i], result.gp, result.phi, i == 0 ? &result.uploads : nullptr); },
      cfg.workers);
  for (auto& rows : per_seed) {
    for (auto& [row, rel] : rows) {
      result.rows.push_back(std::move(row));
      result.reliability.push_back(std::move(rel));
    }
  }
  return result;
}

// ---- report emission ----

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = "protocol,dataset,alpha,ACC,ECE,seed,wall_time\n";
  for (const auto& r : rows) {
    out += r.protocol + ',' + r.dataset + ',' + r.alpha + ',' + format_fixed(r.acc) + ',' + format_fixed(r.ece) + ',' +
           std::to_string(r.seed) + ',' + (r.wall_time ? format_fixed(*r.wall_time, 3) : std::string("-")) + '\n';
  }
  return out;
}

inline std::string reliability_csv(std::span<const ReliabilityRecord> records, const std::string& protocol) {
  std::string out = "seed,bin,lower,upper,confidence,accuracy,count\n";
  for (const auto& rec : records) {
    if (rec.protocol != protocol) continue;
    for (std::size_t k = 0; k < rec.bins.size(); ++k) {
      const auto& b = rec.bins[k];
      out += std::to_string(rec.seed) + ',' + std::to_string(k) + ',' + format_fixed(b.lower, 9) + ',' +
             format_fixed(b.upper, 9) + ',' + format_fixed(b.confidence, 9) + ',' + format_fixed(b.accuracy, 9) + ',' +
             std::to_string(b.count) + '\n';
    }
  }
  return out;
}

struct ProtocolSummary {
  double acc_mean = 0, acc_std = 0, ece_mean = 0, ece_std = 0;
  std::size_t count = 0;
};

inline std::map<std::string, ProtocolSummary> summarize(std::span<const ReportRow> rows) {
  std::map<std::string, std::vector<const ReportRow*>> groups;
  for (const auto& r : rows) groups[r.protocol].push_back(&r);
  std::map<std::string, ProtocolSummary> out;
  for (const auto& [p, rs] : groups) {
    ProtocolSummary s;
    s.count = rs.size();
    for (const auto* r : rs) {
      s.acc_mean += r->acc;
      s.ece_mean += r->ece;
    }
    s.acc_mean /= static_cast<double>(s.count);
    s.ece_mean /= static_cast<double>(s.count);
    if (s.count > 1) {
      for (const auto* r : rs) {
        s.acc_std += (r->acc - s.acc_mean) * (r->acc - s.acc_mean);
        s.ece_std += (r->ece - s.ece_mean) * (r->ece - s.ece_mean);
      }
      s.acc_std = std::sqrt(s.acc_std / static_cast<double>(s.count - 1));
      s.ece_std = std::sqrt(s.ece_std / static_cast<double>(s.count - 1));
    }
    out[p] = s;
  }
  return out;
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const ExperimentResult& result) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["alpha"] = alpha_tag(cfg.task);
  j["seeds"] = cfg.seeds;
  j["protocols"] = cfg.protocols;
  j["config"] = {{"clients", cfg.task.clients},   {"n", cfg.task.n},           {"classes", cfg.task.classes},
                 {"features", cfg.task.features}, {"draws", cfg.draws},        {"n_prime", cfg.n_prime},
                 {"summary_points", cfg.summary_points}, {"erm_steps", cfg.erm.steps}, {"ece_bins", cfg.ece_bins},
                 {"feature_file", cfg.feature_file}};
  auto& results = j["results"];
  results = nlohmann::json::object();
  for (const auto& [p, s] : summarize(result.rows)) {
    results[p] = {{"ACC_mean", s.acc_mean}, {"ACC_std", s.acc_std}, {"ECE_mean", s.ece_mean},
                  {"ECE_std", s.ece_std},   {"runs", s.count}};
  }
  if (!result.meta_trace.empty()) {
    j["meta_training"] = {{"epochs", result.meta_trace.size()},
                          {"first_epoch_loss", result.meta_trace.front()},
                          {"last_epoch_loss", result.meta_trace.back()},
                          {"heldout_initial_loss", result.meta_heldout_initial.value_or(0.0)},
                          {"heldout_final_loss", result.meta_heldout_final.value_or(0.0)}};
  }
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  write_text(root / "report.csv", report_csv(result.rows));
  write_text(root / "summary.json", summary_json(cfg, result).dump(2) + "\n");
  for (const auto& p : cfg.protocols) write_text(root / ("reliability_" + p + ".csv"), reliability_csv(result.reliability, p));
  wire::Checkpoint gp_ck;
  add_to_checkpoint(gp_ck, result.gp);
  wire::write_file((root / "generator.fmpc").string(), wire::encode_checkpoint(gp_ck));
  if (std::find(cfg.protocols.begin(), cfg.protocols.end(), "FMP") != cfg.protocols.end()) {
    wire::Checkpoint phi_ck;
    add_to_checkpoint(phi_ck, result.phi);
    wire::write_file((root / "embedder.fmpc").string(), wire::encode_checkpoint(phi_ck));
    if (!result.meta_trace.empty()) write_text(root / "meta_trace.csv", trace_csv(result.meta_trace));
  }
  if (!result.uploads.compressed.empty() || !result.uploads.samples.empty()) {
    std::filesystem::create_directories(root / "uploads");
    for (const auto& u : result.uploads.compressed) {
      wire::write_file((root / "uploads" / ("client_" + std::to_string(u.client_id) + ".fmpu")).string(), encode_upload(u));
    }
    for (const auto& u : result.uploads.samples) {
      wire::write_file((root / "uploads" / ("client_" + std::to_string(u.client_id) + ".fmps")).string(),
                       encode_sample_upload(u));
    }
  }
}

// ---- report merging ----

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("protocol,dataset,alpha,ACC,ECE,seed", 0) != 0) {
    throw FormatError("not a report.csv (bad header)", 0);
  }
  std::vector<ReportRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw ConfigError("report line " + std::to_string(lineno) + ": expected 7 columns");
    ReportRow r;
    r.protocol = f[0];
    r.dataset = f[1];
    r.alpha = f[2];
    r.acc = detail::parse_value<double>("ACC", f[3]);
    r.ece = detail::parse_value<double>("ECE", f[4]);
    r.seed = detail::parse_value<std::uint64_t>("seed", f[5]);
    if (f[6] != "-") r.wall_time = detail::parse_value<double>("wall_time", f[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// One line per (dataset, alpha, protocol) with seed-averaged metrics.
inline std::string merge_reports(std::span<const ReportRow> rows) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<ReportRow>> groups;
  for (const auto& r : rows) groups[{r.dataset, r.alpha, r.protocol}].push_back(r);
  std::string out = "dataset,alpha,protocol,runs,ACC_mean,ACC_std,ECE_mean,ECE_std\n";
  for (const auto& [key, rs] : groups) {
    const auto s = summarize(rs).begin()->second;
    out += std::get<0>(key) + ',' + std::get<1>(key) + ',' + std::get<2>(key) + ',' + std::to_string(s.count) + ',' +
           format_fixed(s.acc_mean) + ',' + format_fixed(s.acc_std) + ',' + format_fixed(s.ece_mean) + ',' +
           format_fixed(s.ece_std) + '\n';
  }
  return out;
}

}  // namespace fmp
