#include <gtest/gtest.h>

#include "fmp/data.hpp"
#include "fmp/federated.hpp"
#include "oracles.hpp"

using namespace fmp;
using fmp::testing::consensus_oracle;
using fmp::testing::make_upload;

namespace {

PosteriorSamples scalar_samples(std::initializer_list<double> xs) {
  PosteriorSamples s;
  for (double x : xs) s.members.push_back({{0, 0, 1}, {x}});
  return s;
}

const ClassifierShape kShape{2, 2, 2};  // 12 parameters

struct Clients {
  TaskSpec spec;
  std::vector<ClientState> states;
  GeneratorParams gp;
};

Clients small_clients(std::uint64_t seed, std::size_t n = 12) {
  Clients c;
  c.spec.classes = 3;
  c.spec.features = 3;
  c.spec.clients = 3;
  c.spec.n = n;
  c.spec.heads = 2;
  const Task t = sample_task(c.spec, RngStream(seed, 0), seed);
  const RngStream root(seed, 1);
  for (std::size_t m = 0; m < t.clients.size(); ++m) {
    c.states.push_back({static_cast<std::uint32_t>(m), t.clients[m], root.derive(100 + m), root.derive(99)});
  }
  c.gp = make_generator(c.spec.layout(), RngStream(seed, 2));
  return c;
}

ErmOptions quick_erm() {
  ErmOptions o;
  o.steps = 30;
  o.hidden = 4;
  return o;
}

}  // namespace

TEST(Covariance, TwoScalarSamples) {
  const auto v = estimate_covariance(scalar_samples({0.0, 2.0}));
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0], 2.0);
}

TEST(Covariance, IdenticalSamplesHitTheFloor) {
  const auto v = estimate_covariance(scalar_samples({1.5, 1.5, 1.5}));
  EXPECT_EQ(v[0], kCovarianceFloor);
  EXPECT_THROW(estimate_covariance(scalar_samples({1.0})), ProtocolError);
}

TEST(Covariance, MatchesTwoPassFormulaAndIgnoresOrder) {
  RngStream rng(1, 0);
  PosteriorSamples s;
  for (int r = 0; r < 9; ++r) {
    std::vector<double> v(12);
    for (double& x : v) x = 3.0 * rng.normal() + 5.0;
    s.members.push_back({kShape, v});
  }
  const auto got = estimate_covariance(s);
  for (std::size_t j = 0; j < 12; ++j) {
    double mean = 0.0;
    for (const auto& m : s.members) mean += m.values[j];
    mean /= 9.0;
    double ss = 0.0;
    for (const auto& m : s.members) ss += (m.values[j] - mean) * (m.values[j] - mean);
    EXPECT_NEAR(got[j], ss / 8.0, 1e-12 * ss);
  }
  PosteriorSamples shuffled = s;
  rng.shuffle(shuffled.members);
  const auto again = estimate_covariance(shuffled);
  for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(again[j], got[j], 1e-12 * got[j]);
}

TEST(Consensus, HandEvaluatedScalarCase) {
  const ClassifierShape one{0, 0, 1};
  const std::vector<SampleUpload> ups{make_upload(0, one, {0.0}, {1.0}), make_upload(1, one, {2.0}, {3.0})};
  EXPECT_NEAR(cfmp_aggregate(ups).values[0], 0.5, 1e-15);
}

TEST(Consensus, MatchesBruteForceOnRandomInstances) {
  RngStream rng(2, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m_count = 1 + rng.uniform_index(6);
    std::vector<SampleUpload> ups;
    std::vector<std::vector<double>> thetas, vars;
    for (std::size_t m = 0; m < m_count; ++m) {
      std::vector<double> t(12), v(12);
      for (auto& x : t) x = 4.0 * rng.normal();
      for (auto& x : v) x = std::exp(2.0 * rng.normal());
      thetas.push_back(t);
      vars.push_back(v);
      ups.push_back(make_upload(static_cast<std::uint32_t>(m), kShape, t, v));
    }
    const auto got = cfmp_aggregate(ups).values;
    const auto want = consensus_oracle(thetas, vars);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(got[j], want[j], 1e-10) << "trial " << trial;
  }
}

TEST(Consensus, EqualCovariancesReduceToAveraging) {
  RngStream rng(3, 0);
  std::vector<SampleUpload> ups;
  for (std::uint32_t m = 0; m < 5; ++m) {
    std::vector<double> t(12);
    for (auto& x : t) x = rng.normal();
    ups.push_back(make_upload(m, kShape, t, std::vector<double>(12, 0.37)));
  }
  const auto a = cfmp_aggregate(ups).values;
  const auto b = cann_average(ups).values;
  for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(a[j], b[j], 1e-12);
}

TEST(Consensus, InvariantToCommonCovarianceScale) {
  RngStream rng(4, 0);
  std::vector<SampleUpload> ups, scaled;
  for (std::uint32_t m = 0; m < 4; ++m) {
    std::vector<double> t(12), v(12);
    for (auto& x : t) x = rng.normal();
    for (auto& x : v) x = 0.1 + rng.uniform();
    ups.push_back(make_upload(m, kShape, t, v));
    for (auto& x : v) x *= 123.0;
    scaled.push_back(make_upload(m, kShape, t, v));
  }
  const auto a = cfmp_aggregate(ups).values;
  const auto b = cfmp_aggregate(scaled).values;
  for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(a[j], b[j], 1e-10);
}

TEST(Consensus, SingleClientIsIdentityAndMismatchThrows) {
  const std::vector<double> t{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  const std::vector<SampleUpload> one{make_upload(0, kShape, t, std::vector<double>(12, 2.0))};
  EXPECT_EQ(cfmp_aggregate(one).values, t);
  EXPECT_EQ(cann_average(one).values, t);
  const std::vector<SampleUpload> bad{make_upload(0, kShape, t, std::vector<double>(12, 1.0)),
                                      make_upload(1, {1, 1, 1}, {1, 2, 3}, {1, 1, 1})};
  EXPECT_THROW(cfmp_aggregate(bad), ProtocolError);
  EXPECT_THROW(cann_average(bad), ProtocolError);
  EXPECT_THROW(cfmp_aggregate(std::vector<SampleUpload>{}), ProtocolError);
}

TEST(Cann, OppositeParametersCancel) {
  std::vector<double> v(12);
  for (std::size_t j = 0; j < 12; ++j) v[j] = 0.5 * static_cast<double>(j) - 2.0;
  std::vector<double> neg = v;
  for (double& x : neg) x = -x;
  const std::vector<SampleUpload> ups{make_upload(0, kShape, v, std::vector<double>(12, 1.0)),
                                      make_upload(1, kShape, neg, std::vector<double>(12, 1.0))};
  for (double x : cann_average(ups).values) EXPECT_EQ(x, 0.0);
}

TEST(LocalMp, UploadShapeAndCovariance) {
  auto c = small_clients(5);
  const auto u = local_mp_upload(c.states[0], c.gp, 4, 6, quick_erm(), 1);
  EXPECT_EQ(u.draws.size(), 4u);
  EXPECT_EQ(u.covariance.size(), u.draws.members.front().size());
  EXPECT_EQ(u.covariance, estimate_covariance(u.draws));
  for (double v : u.covariance) EXPECT_GE(v, kCovarianceFloor);
  EXPECT_THROW(local_mp_upload(c.states[0], c.gp, 1, 6, quick_erm(), 1), ProtocolError);
}

TEST(LocalMp, ClientsShareTheirInitialModels) {
  auto c = small_clients(6);
  ErmOptions zero = quick_erm();
  zero.steps = 0;
  const auto a = local_mp_upload(c.states[0], c.gp, 2, 6, zero, 1);
  const auto b = local_mp_upload(c.states[1], c.gp, 2, 6, zero, 1);
  EXPECT_EQ(a.draws.members[1].values, b.draws.members[1].values);
  EXPECT_NE(a.draws.members[0].values, a.draws.members[1].values);
}

TEST(Compress, RoundTripShapeAndOrderIndependence) {
  auto c = small_clients(7);
  const auto phi = init_embedder(c.spec.layout(), 4, RngStream(7, 3));
  const auto u = client_compress_upload(c.states[0], phi);
  EXPECT_EQ(u.s(), 4u);
  EXPECT_EQ(u.d(), c.spec.layout().width());
  const auto bytes = encode_upload(u);
  const auto back = decode_upload(bytes);
  EXPECT_TRUE(bitwise_equal(back.payload, u.payload));
  EXPECT_EQ(back.client_id, u.client_id);
  EXPECT_EQ(back.seed_metadata, u.seed_metadata);

  ClientState shuffled = c.states[0];
  RngStream rng(7, 4);
  const auto perm = fmp::testing::random_permutation(rng, shuffled.data.n());
  shuffled.data = shuffled.data.gather(perm);
  EXPECT_EQ(encode_upload(client_compress_upload(shuffled, phi)), bytes);
}

TEST(Compress, MessageLengthIndependentOfLocalSize) {
  const auto small = small_clients(8, 10);
  const auto large = small_clients(8, 40);
  const auto phi = init_embedder(small.spec.layout(), 3, RngStream(8, 3));
  const std::size_t d = small.spec.layout().width();
  const std::size_t expected = 4 + 2 + 4 + 4 + 4 + 8 + 3 * d * 8 + 4;
  EXPECT_EQ(encode_upload(client_compress_upload(small.states[0], phi)).size(), expected);
  EXPECT_EQ(encode_upload(client_compress_upload(large.states[0], phi)).size(), expected);
}

TEST(Fmp, UploadOrderDoesNotMatter) {
  auto c = small_clients(9);
  const auto phi = init_embedder(c.spec.layout(), 3, RngStream(9, 3));
  std::vector<CompressedUpload> ups;
  for (const auto& s : c.states) ups.push_back(client_compress_upload(s, phi));
  std::vector<CompressedUpload> reversed(ups.rbegin(), ups.rend());
  const RngStream draw(9, 4);
  EXPECT_EQ(fmp_sample(ups, c.gp, 5, draw, quick_erm()).values, fmp_sample(reversed, c.gp, 5, draw, quick_erm()).values);
}

TEST(Fmp, TrainingSetSize) {
  auto c = small_clients(10);
  const auto phi = init_embedder(c.spec.layout(), 3, RngStream(10, 3));
  std::vector<CompressedUpload> ups;
  for (const auto& s : c.states) ups.push_back(client_compress_upload(s, phi));
  EXPECT_EQ(fmp_training_set(ups, c.gp, 7, RngStream(10, 4)).n(), 3u * 3 + 7);
  EXPECT_EQ(fmp_training_set(ups, c.gp, 0, RngStream(10, 4)).n(), 3u * 3);
}

TEST(Fmp, IdentityEmbedderReducesToCentralizedMp) {
  auto c = small_clients(11);
  const auto phi = identity_embedder(c.spec.layout());
  std::vector<CompressedUpload> ups;
  std::vector<PointSet> parts;
  for (const auto& s : c.states) {
    ups.push_back(client_compress_upload(s, phi));
    parts.push_back(s.data);
  }
  const PointSet pooled = concat(std::span<const PointSet>(parts));
  const RngStream draw(11, 5);
  EXPECT_EQ(fmp_sample(ups, c.gp, 8, draw, quick_erm()).values,
            draw_mp_sample(pooled, c.gp, 8, draw, quick_erm()).values);
}

TEST(Fmp, RejectsMismatchedUploads) {
  auto c = small_clients(12);
  EXPECT_THROW(aggregate_uploads(std::vector<CompressedUpload>{}, c.gp.layout), ProtocolError);
  CompressedUpload wrong;
  wrong.payload = Matrix(2, 3);
  EXPECT_THROW(aggregate_uploads(std::vector<CompressedUpload>{wrong}, c.gp.layout), ProtocolError);
}

TEST(SampleUploadCodec, RoundTrip) {
  auto c = small_clients(13);
  const auto u = local_mp_upload(c.states[1], c.gp, 3, 4, quick_erm(), 1);
  const auto back = decode_sample_upload(encode_sample_upload(u));
  EXPECT_EQ(back.client_id, u.client_id);
  EXPECT_EQ(back.seed_metadata, u.seed_metadata);
  EXPECT_EQ(back.covariance, u.covariance);
  EXPECT_EQ(back.draws.provenance, Provenance::LMP);
  ASSERT_EQ(back.draws.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(back.draws.members[r].values, u.draws.members[r].values);
}
