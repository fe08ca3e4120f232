#include <gtest/gtest.h>

#include <sstream>

#include "fmp/eval.hpp"

using namespace fmp;

namespace {

PredictionBatch batch(const std::vector<std::vector<double>>& rows, std::vector<std::uint32_t> labels) {
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return PredictionBatch{std::move(m), std::move(labels)};
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

ExperimentConfig tiny_experiment() {
  return parse(R"(
[experiment]
name = tiny
seeds = 3, 4
protocols = LANN, LMP, ANN, MP, CANN, CFMP, FMP
test_size = 60

[task]
classes = 2
features = 2
clients = 2
n = 12
center_scale = 2

[mp]
draws = 2
n_prime = 6

[erm]
steps = 30

[fmp]
summary_points = 4
meta_tasks = 2
meta_epochs = 2
unroll_steps = 3
)");
}

}  // namespace

TEST(Accuracy, HandCases) {
  EXPECT_EQ(accuracy(batch({{1, 0}, {0, 1}}, {0, 1})), 1.0);
  EXPECT_EQ(accuracy(batch({{0, 1}, {1, 0}}, {0, 1})), 0.0);
  EXPECT_EQ(accuracy(batch({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}}, {0, 1, 1, 1})), 0.75);
}

TEST(Accuracy, InvalidBatchesThrow) {
  EXPECT_THROW(accuracy(batch({{0.5, 0.4}}, {0})), NumericError);
  EXPECT_THROW(accuracy(batch({{0.5, 0.5}}, {2})), RangeError);
  EXPECT_THROW(accuracy(PredictionBatch{Matrix(0, 2), {}}), ProtocolError);
  EXPECT_THROW(accuracy(PredictionBatch{Matrix(2, 2), {0}}), ShapeError);
}

TEST(Ece, TwoPointsAtConfidencePointEight) {
  EXPECT_NEAR(ece(batch({{0.8, 0.2}, {0.8, 0.2}}, {0, 1})), 0.3, 1e-15);
}

TEST(Ece, PerfectPredictionsAreCalibrated) {
  EXPECT_EQ(ece(batch({{1, 0, 0}, {0, 0, 1}, {0, 1, 0}}, {0, 2, 1})), 0.0);
}

TEST(Ece, UniformPredictionsWithBalancedLabelsAreCalibrated) {
  std::vector<std::vector<double>> rows(8, std::vector<double>(4, 0.25));
  EXPECT_NEAR(ece(batch(rows, {0, 1, 2, 3, 0, 1, 2, 3})), 0.0, 1e-12);
}

TEST(Reliability, CountsAndRecomputedEce) {
  RngStream rng(1, 0);
  PredictionBatch b{softmax_rows(scale(sample_gaussian(rng, 300, 3), 2.0)), {}};
  for (std::size_t i = 0; i < 300; ++i) b.labels.push_back(static_cast<std::uint32_t>(rng.uniform_index(3)));
  const auto table = reliability_data(b, 10);
  ASSERT_EQ(table.size(), 10u);
  std::size_t n = 0;
  double e = 0.0;
  for (const auto& bin : table) n += bin.count;
  EXPECT_EQ(n, 300u);
  for (const auto& bin : table) e += static_cast<double>(bin.count) / 300.0 * std::abs(bin.accuracy - bin.confidence);
  EXPECT_NEAR(e, ece(b, 10), 1e-12);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_DOUBLE_EQ(table[k].lower, k / 10.0);
    if (table[k].count > 0) {
      EXPECT_GT(table[k].confidence, table[k].lower);
      EXPECT_LE(table[k].confidence, table[k].upper);
    }
  }
}

TEST(Reliability, SinglePredictionFillsOneBin) {
  const auto table = reliability_data(batch({{0.3, 0.7}}, {1}), 5);
  std::size_t filled = 0;
  for (std::size_t k = 0; k < 5; ++k) {
    if (table[k].count == 0) continue;
    ++filled;
    EXPECT_EQ(k, 3u);
    EXPECT_EQ(table[k].confidence, 0.7);
    EXPECT_EQ(table[k].accuracy, 1.0);
  }
  EXPECT_EQ(filled, 1u);
}

TEST(Reliability, BinEdgesAreRightClosed) {
  EXPECT_EQ(confidence_bin(0.2, 5), 0u);
  EXPECT_EQ(confidence_bin(0.2000001, 5), 1u);
  EXPECT_EQ(confidence_bin(1.0, 5), 4u);
  EXPECT_EQ(confidence_bin(0.0, 5), 0u);
  EXPECT_THROW(reliability_data(batch({{1, 0}}, {0}), 0), ConfigError);
}

TEST(Config, ParsesSectionsAndComments) {
  const auto cfg = parse(R"(
# leading comment
[experiment]
name = demo
seeds = 5, 6,7
protocols = fmp, MP
timing = true
; another comment
[task]
alpha = 0.25
clients = 3
[fmp]
norm = l1
meta_epochs = 7
[erm]
hidden = 12
)");
  EXPECT_EQ(cfg.name, "demo");
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{5, 6, 7}));
  EXPECT_EQ(cfg.protocols, (std::vector<std::string>{"FMP", "MP"}));
  EXPECT_TRUE(cfg.timing);
  EXPECT_EQ(cfg.task.partition, PartitionKind::Dirichlet);
  EXPECT_EQ(cfg.task.alpha, 0.25);
  EXPECT_EQ(cfg.task.clients, 3u);
  EXPECT_EQ(cfg.meta.norm, MetaNorm::L1);
  EXPECT_EQ(cfg.meta.epochs, 7u);
  EXPECT_EQ(cfg.meta.inner.hidden, 12u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse("[experiment]\nnmae = x\n"), ConfigError);
  EXPECT_THROW(parse("[bogus]\nname = x\n"), ConfigError);
  EXPECT_THROW(parse("[task]\nclients = many\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\ntiming = maybe\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nprotocols = MP, XYZ\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nprotocols = MP, mp\n"), ConfigError);
  EXPECT_THROW(parse("[task]\nalpha = -1\n"), ConfigError);
  EXPECT_THROW(parse("[fmp]\nnorm = l3\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.ini"), ConfigError);
}

TEST(Config, ValidationCatchesInconsistentSettings) {
  auto cfg = parse("[mp]\ndraws = 1\n");
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg.protocols = {"MP"};
  EXPECT_NO_THROW(validate(cfg));
  cfg.seeds.clear();
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Alpha, HomogAndDirichlet) {
  TaskSpec spec;
  apply_alpha(spec, "0.1");
  EXPECT_EQ(spec.partition, PartitionKind::Dirichlet);
  EXPECT_EQ(alpha_tag(spec), "0.1");
  apply_alpha(spec, "homog");
  EXPECT_EQ(spec.partition, PartitionKind::Homogeneous);
  EXPECT_EQ(alpha_tag(spec), "homog");
  EXPECT_THROW(apply_alpha(spec, "0"), ConfigError);
  EXPECT_THROW(apply_alpha(spec, "abc"), ConfigError);
}

TEST(Experiment, ReportIsDeterministicWithOneRowPerProtocolAndSeed) {
  const auto cfg = tiny_experiment();
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  EXPECT_EQ(report_csv(a.rows), report_csv(b.rows));
  ASSERT_EQ(a.rows.size(), cfg.seeds.size() * cfg.protocols.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].seed, cfg.seeds[i / cfg.protocols.size()]);
    EXPECT_EQ(a.rows[i].protocol, cfg.protocols[i % cfg.protocols.size()]);
    EXPECT_FALSE(a.rows[i].wall_time.has_value());
    EXPECT_GE(a.rows[i].acc, 0.0);
    EXPECT_LE(a.rows[i].acc, 1.0);
  }
  EXPECT_EQ(a.meta_trace.size(), cfg.meta.epochs);
  EXPECT_EQ(a.uploads.compressed.size(), cfg.task.clients);
  for (const auto& p : cfg.protocols) EXPECT_EQ(reliability_csv(a.reliability, p), reliability_csv(b.reliability, p));
}

TEST(Experiment, AnnSolvesASeparableTask) {
  auto cfg = parse(R"(
[experiment]
protocols = ANN
test_size = 400
[task]
classes = 2
features = 2
center_scale = 6
noise = 0.5
clients = 2
n = 40
[erm]
steps = 300
)");
  const auto r = run_experiment(cfg);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_GE(r.rows[0].acc, 0.95);
}

TEST(Report, CsvLayoutAndParseRoundTrip) {
  std::vector<ReportRow> rows{{"MP", "d", "homog", 0.5, 0.125, 1, std::nullopt},
                              {"MP", "d", "homog", 0.7, 0.075, 2, 1.25},
                              {"FMP", "d", "homog", 0.9, 0.05, 1, std::nullopt}};
  const std::string csv = report_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "protocol,dataset,alpha,ACC,ECE,seed,wall_time");
  EXPECT_NE(csv.find("MP,d,homog,0.500000,0.125000,1,-\n"), std::string::npos);
  EXPECT_NE(csv.find("MP,d,homog,0.700000,0.075000,2,1.250\n"), std::string::npos);
  const auto back = parse_report_csv(csv);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(report_csv(back), csv);
  EXPECT_THROW(parse_report_csv("nope\n"), FormatError);
  EXPECT_THROW(parse_report_csv("protocol,dataset,alpha,ACC,ECE,seed,wall_time\nMP,d\n"), ConfigError);
}

TEST(Report, MergeAveragesAcrossSeeds) {
  std::vector<ReportRow> rows{{"MP", "d", "homog", 0.5, 0.1, 1, std::nullopt},
                              {"MP", "d", "homog", 0.7, 0.3, 2, std::nullopt},
                              {"FMP", "d", "0.1", 0.9, 0.05, 1, std::nullopt}};
  const std::string merged = merge_reports(rows);
  EXPECT_EQ(merged,
            "dataset,alpha,protocol,runs,ACC_mean,ACC_std,ECE_mean,ECE_std\n"
            "d,0.1,FMP,1,0.900000,0.000000,0.050000,0.000000\n"
            "d,homog,MP,2,0.600000,0.141421,0.200000,0.141421\n");
}
