#include <gtest/gtest.h>

#include "fmp/data.hpp"
#include "fmp/metatrain.hpp"
#include "oracles.hpp"

using namespace fmp;
using fmp::testing::tiny_meta;

namespace {

using Bytes = wire::Bytes;

struct Corpus {
  TaskSpec spec;
  std::vector<Task> tasks;
  GeneratorParams gp;
  EmbedderParams phi0;
  MetaConfig cfg;
};

// K=4 tasks, M=2 clients of n=16, s=4 summary points, width 8, T=5.
Corpus tiny_corpus(std::uint64_t seed) {
  Corpus c;
  c.spec.classes = 3;
  c.spec.features = 4;
  c.spec.heads = 4;
  c.spec.clients = 2;
  c.spec.n = 16;
  c.spec.center_scale = 1.5;
  c.tasks = sample_corpus(c.spec, 4, RngStream(seed, 0));
  c.gp = make_generator(c.spec.layout(), RngStream(seed, 1));
  c.phi0 = init_embedder(c.spec.layout(), 4, RngStream(seed, 2));
  c.cfg.unroll_steps = 5;
  c.cfg.inner.steps = 5;
  c.cfg.inner.hidden = 8;
  c.cfg.workers = 1;
  return c;
}

Bytes checkpoint_bytes(const GeneratorParams& gp) {
  wire::Checkpoint ck;
  add_to_checkpoint(ck, gp);
  return wire::encode_checkpoint(ck);
}

}  // namespace

TEST(PerTaskLoss, IdentityEmbedderGivesZeroLoss) {
  auto t = tiny_meta(1);
  t.phi = identity_embedder(t.task.clients.front().layout());
  EXPECT_EQ(per_task_loss(t.task, t.phi, t.gp, t.cfg), 0.0);
}

TEST(PerTaskLoss, GradientMatchesCentralDifferences) {
  for (std::uint64_t seed : {2u, 3u}) {
    EXPECT_LT(fmp::testing::per_task_gradient_error(tiny_meta(seed)), 1e-3) << "seed " << seed;
  }
}

TEST(PerTaskLoss, InvariantToLocalRowOrder) {
  auto t = tiny_meta(4);
  const double base = per_task_loss(t.task, t.phi, t.gp, t.cfg);
  RngStream rng(4, 9);
  for (auto& c : t.task.clients) c = c.gather(fmp::testing::random_permutation(rng, c.n()));
  EXPECT_EQ(per_task_loss(t.task, t.phi, t.gp, t.cfg), base);
  EXPECT_GE(base, 0.0);
}

TEST(PerTaskLoss, L1NormIsNonNegative) {
  auto t = tiny_meta(5);
  t.cfg.norm = MetaNorm::L1;
  const double l1 = per_task_loss(t.task, t.phi, t.gp, t.cfg);
  t.cfg.norm = MetaNorm::L2;
  const double l2 = per_task_loss(t.task, t.phi, t.gp, t.cfg);
  EXPECT_GT(l1, 0.0);
  EXPECT_GE(l1, l2);
}

TEST(PerTaskLoss, UnrolledBranchEqualsServerSample) {
  auto t = tiny_meta(6);
  t.cfg.inner.steps = 25;
  t.cfg.unroll_steps = 25;
  const ModelParams target = mp_target(t.task, t.gp, t.cfg);
  const TaskLoss tl = per_task_loss_and_grad(t.task, t.phi, t.gp, t.cfg, target);
  std::vector<CompressedUpload> ups;
  for (const auto& c : task_clients(t.task)) ups.push_back(client_compress_upload(c, t.phi));
  const ModelParams server = fmp_sample(ups, t.gp, t.cfg.n_prime, task_stream(t.task), t.cfg.inner);
  EXPECT_EQ(tl.fmp_branch.values, server.values);
}

TEST(BaseSet, SharedPerTaskAndStandardNormal) {
  auto t = tiny_meta(7);
  const PointLayout layout = t.gp.layout;
  EXPECT_TRUE(bitwise_equal(sample_base_set_for_task(t.task, 5, layout).points(),
                            sample_base_set_for_task(t.task, 5, layout).points()));
  Task other = t.task;
  other.base_seed += 1;
  EXPECT_FALSE(bitwise_equal(sample_base_set_for_task(t.task, 5, layout).points(),
                             sample_base_set_for_task(other, 5, layout).points()));
  const Matrix big = sample_base_set_for_task(t.task, 100000 / layout.width(), layout).points();
  const double n = static_cast<double>(big.size());
  const double mean = sum(big) / n;
  double var = 0.0;
  for (double v : big.values()) var += (v - mean) * (v - mean);
  var /= n - 1;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(MetaTrain, ZeroEpochsReturnsInitialEmbedder) {
  auto c = tiny_corpus(1);
  c.cfg.epochs = 0;
  const auto r = meta_train(c.tasks, c.phi0, c.gp, c.cfg);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_TRUE(bitwise_equal(r.phi.weights.seeds, c.phi0.weights.seeds));
  EXPECT_THROW(meta_train(std::vector<Task>{}, c.phi0, c.gp, c.cfg), ConfigError);
}

TEST(MetaTrain, CorpusOrderDoesNotMatter) {
  auto c = tiny_corpus(2);
  c.cfg.epochs = 3;
  const auto a = meta_train(c.tasks, c.phi0, c.gp, c.cfg);
  std::vector<Task> reversed(c.tasks.rbegin(), c.tasks.rend());
  const auto b = meta_train(reversed, c.phi0, c.gp, c.cfg);
  EXPECT_EQ(a.trace, b.trace);
  wire::Checkpoint ca, cb;
  add_to_checkpoint(ca, a.phi);
  add_to_checkpoint(cb, b.phi);
  EXPECT_EQ(wire::encode_checkpoint(ca), wire::encode_checkpoint(cb));
}

TEST(MetaTrain, GeneratorStaysFrozen) {
  auto c = tiny_corpus(3);
  c.cfg.epochs = 2;
  const auto before = checkpoint_bytes(c.gp);
  meta_train(c.tasks, c.phi0, c.gp, c.cfg);
  EXPECT_EQ(checkpoint_bytes(c.gp), before);
}

TEST(MetaTrain, TinyCorpusHalvesTheLoss) {
  auto c = tiny_corpus(4);
  c.cfg.epochs = 200;
  const auto r = meta_train(c.tasks, c.phi0, c.gp, c.cfg);
  ASSERT_EQ(r.trace.size(), 200u);
  const auto targets = mp_targets(c.tasks, c.gp, c.cfg);
  const double final_loss = mean_task_loss(c.tasks, r.phi, c.gp, c.cfg, targets);
  EXPECT_LT(final_loss, 0.5 * r.trace.front());
}

TEST(MetaTrain, DivergenceReportsTheEpoch) {
  auto c = tiny_corpus(5);
  c.cfg.epochs = 5;
  c.cfg.outer.lr = 1e200;
  try {
    meta_train(c.tasks, c.phi0, c.gp, c.cfg);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(MetaTrain, FreshBatchesFollowTheSampler) {
  auto c = tiny_corpus(6);
  c.cfg.epochs = 2;
  std::vector<std::size_t> asked;
  const auto r = meta_train(
      [&](std::size_t e) {
        asked.push_back(e);
        return sample_corpus(c.spec, 2, RngStream(6, 100 + e));
      },
      c.phi0, c.gp, c.cfg);
  EXPECT_EQ(asked, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.trace.size(), 2u);
}

TEST(Checkpoint, EmbedderGeneratorAndSamplesRoundTrip) {
  auto c = tiny_corpus(7);
  RngStream rng(7, 5);
  PosteriorSamples s;
  for (int r = 0; r < 3; ++r) s.members.push_back(init_classifier({4, 8, 3}, rng.derive(r)));
  wire::Checkpoint ck;
  add_to_checkpoint(ck, c.phi0);
  add_to_checkpoint(ck, c.gp);
  add_to_checkpoint(ck, s);
  const auto back = wire::decode_checkpoint(wire::encode_checkpoint(ck));
  const auto phi = embedder_from_checkpoint(back);
  const auto gp = generator_from_checkpoint(back);
  const auto s2 = samples_from_checkpoint(back);
  EXPECT_TRUE(phi.layout == c.phi0.layout);
  EXPECT_TRUE(bitwise_equal(phi.weights.mab.ffn.w2, c.phi0.weights.mab.ffn.w2));
  EXPECT_EQ(checkpoint_bytes(gp), checkpoint_bytes(c.gp));
  ASSERT_EQ(s2.size(), 3u);
  for (int r = 0; r < 3; ++r) EXPECT_EQ(s2.members[r].values, s.members[r].values);

  wire::Checkpoint idck;
  add_to_checkpoint(idck, identity_embedder(c.spec.layout()));
  EXPECT_EQ(embedder_from_checkpoint(wire::decode_checkpoint(wire::encode_checkpoint(idck))).mode,
            EmbedderMode::Identity);
}

TEST(Trace, CsvHasHeaderAndOneLinePerEpoch) {
  const std::vector<double> tr{1.5, 0.25};
  EXPECT_EQ(trace_csv(tr), "epoch,mean_loss\n0,1.5\n1,0.25\n");
}
