#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmp/data.hpp"
#include "fmp/eval.hpp"
#include "fmp/federated.hpp"
#include "fmp/metatrain.hpp"
#include "fmp/wire.hpp"

namespace {

using fmp::ExperimentConfig;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string protocols;
  std::string alpha;
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : fmp::load_config(c.config);
  if (!c.protocols.empty()) cfg.protocols = fmp::parse_protocols(c.protocols);
  if (!c.alpha.empty()) fmp::apply_alpha(cfg.task, c.alpha);
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_protocols) {
  app->add_option("--config", c.config, "experiment config file (INI sections)");
  app->add_option("--seed", c.seed, "seed override");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--alpha", c.alpha, "Dirichlet concentration, or 'homog'");
  if (with_protocols) app->add_option("--protocols", c.protocols, "comma list of LANN,LMP,ANN,MP,CANN,CFMP,FMP");
}

int gen_tasks(const Common& c) {
  auto cfg = load(c);
  if (c.seed) cfg.meta_seed = *c.seed;
  cfg.fresh_tasks = false;
  const auto corpus = fmp::meta_batch(cfg, 0);
  std::filesystem::create_directories(cfg.out);
  const auto path = std::filesystem::path(cfg.out) / "tasks.fmpc";
  fmp::wire::write_file(path.string(), fmp::wire::encode_checkpoint(fmp::corpus_to_checkpoint(corpus)));
  std::cout << "wrote " << corpus.size() << " tasks to " << path.string() << "\n";
  return 0;
}

int meta_train(const Common& c, const std::string& tasks_path) {
  auto cfg = load(c);
  if (c.seed) cfg.meta_seed = *c.seed;
  const auto gp = fmp::experiment_generator(cfg);
  fmp::ExperimentResult result;
  fmp::EmbedderParams phi;
  if (!tasks_path.empty()) {
    const auto corpus = fmp::corpus_from_checkpoint(fmp::wire::decode_checkpoint(fmp::wire::read_file(tasks_path)));
    const auto phi0 = fmp::init_embedder(gp.layout, cfg.summary_points, fmp::RngStream(cfg.meta_seed, 0xF1F1));
    auto trained = fmp::meta_train(corpus, phi0, gp, cfg.meta);
    phi = trained.phi;
    result.meta_trace = trained.trace;
  } else {
    cfg.embedder_checkpoint.clear();
    phi = fmp::train_embedder(cfg, gp, &result);
  }
  std::filesystem::create_directories(cfg.out);
  const std::filesystem::path root(cfg.out);
  fmp::wire::Checkpoint phi_ck, gp_ck;
  fmp::add_to_checkpoint(phi_ck, phi);
  fmp::add_to_checkpoint(gp_ck, gp);
  fmp::wire::write_file((root / "embedder.fmpc").string(), fmp::wire::encode_checkpoint(phi_ck));
  fmp::wire::write_file((root / "generator.fmpc").string(), fmp::wire::encode_checkpoint(gp_ck));
  fmp::write_text(root / "meta_trace.csv", fmp::trace_csv(result.meta_trace));
  if (!result.meta_trace.empty()) {
    std::cout << "meta-train: epoch-0 loss " << result.meta_trace.front() << ", last epoch "
              << result.meta_trace.back() << "\n";
  }
  if (result.meta_heldout_final) {
    std::cout << "held-out loss " << *result.meta_heldout_initial << " -> " << *result.meta_heldout_final << "\n";
  }
  return 0;
}

int run(const Common& c) {
  auto cfg = load(c);
  if (c.seed) cfg.seeds = {*c.seed};
  const auto result = fmp::run_experiment(cfg);
  fmp::write_outputs(cfg, result, cfg.out);
  std::cout << fmp::merge_reports(result.rows);
  return 0;
}

int report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<fmp::ReportRow> rows;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw fmp::Error("cannot open '" + path + "'");
    std::stringstream text;
    text << in.rdbuf();
    auto part = fmp::parse_report_csv(text.str());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::string merged = fmp::merge_reports(rows);
  if (out.empty()) {
    std::cout << merged;
  } else {
    fmp::write_text(out, merged);
  }
  return 0;
}

nlohmann::json describe_checkpoint(const fmp::wire::Checkpoint& ck) {
  nlohmann::json j;
  j["magic"] = "FMPC";
  auto& sections = j["sections"];
  sections = nlohmann::json::array();
  for (const auto& s : ck.sections) sections.push_back({{"name", s.name}, {"rows", s.data.rows()}, {"cols", s.data.cols()}});
  return j;
}

nlohmann::json describe_features(const fmp::FeatureDataset& ds) {
  nlohmann::json j;
  j["magic"] = "FMPF";
  j["rows"] = ds.size();
  j["features"] = ds.features.cols();
  j["classes"] = ds.classes;
  std::vector<std::size_t> hist(ds.classes, 0);
  for (auto l : ds.labels) ++hist[l];
  j["label_histogram"] = hist;
  return j;
}

int inspect(const std::string& path) {
  const auto bytes = fmp::wire::read_file(path);
  if (bytes.size() < 4) throw fmp::FormatError("file too short for a magic tag", 0);
  const std::string magic(bytes.begin(), bytes.begin() + 4);
  nlohmann::json j;
  if (magic == "FMPU") {
    j = fmp::to_json(fmp::decode_upload(bytes));
  } else if (magic == "FMPS") {
    j = fmp::to_json(fmp::decode_sample_upload(bytes));
  } else if (magic == "FMPC") {
    j = describe_checkpoint(fmp::wire::decode_checkpoint(bytes));
  } else if (magic == "FMPF") {
    j = describe_features(fmp::decode_feature_file(bytes));
  } else {
    throw fmp::FormatError("unknown magic '" + magic + "'", 0);
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated martingale posterior sampling"};
  app.require_subcommand(1);

  Common gen_opts, meta_opts, run_opts;
  auto* gen = app.add_subcommand("gen-tasks", "sample a meta-training task corpus");
  add_common(gen, gen_opts, false);

  std::string tasks_path;
  auto* meta = app.add_subcommand("meta-train", "meta-train the embedder");
  add_common(meta, meta_opts, false);
  meta->add_option("--tasks", tasks_path, "corpus written by gen-tasks (fixed corpus)");

  auto* runc = app.add_subcommand("run", "run the selected protocols and write reports");
  add_common(runc, run_opts, true);

  std::vector<std::string> report_inputs;
  std::string report_out;
  auto* rep = app.add_subcommand("report", "merge report.csv files into one comparison table");
  rep->add_option("reports", report_inputs, "report.csv files")->required();
  rep->add_option("--out", report_out, "output CSV (default stdout)");

  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect-upload", "dump a wire message or checkpoint as JSON");
  ins->add_option("file", inspect_path, "FMPU, FMPS, FMPC or FMPF file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_tasks(gen_opts);
    if (*meta) return meta_train(meta_opts, tasks_path);
    if (*runc) return run(run_opts);
    if (*rep) return report(report_inputs, report_out);
    if (*ins) return inspect(inspect_path);
  } catch (const fmp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fmp::WireError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
