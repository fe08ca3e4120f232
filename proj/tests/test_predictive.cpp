#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fmp/data.hpp"
#include "fmp/predictive.hpp"
#include "oracles.hpp"

using namespace fmp;

namespace {

const PointLayout kBlobLayout{.features = 2, .classes = 2, .heads = 2};

// Two well separated 2-D blobs around (-3, 0) and (3, 0).
PointSet two_blobs(std::uint64_t seed, std::size_t per_class) {
  RngStream rng(seed, 0);
  Matrix x(2 * per_class, 2);
  std::vector<std::uint32_t> y(2 * per_class);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    y[i] = static_cast<std::uint32_t>(i % 2);
    x(i, 0) = (y[i] == 0 ? -3.0 : 3.0) + 0.5 * rng.normal();
    x(i, 1) = 0.5 * rng.normal();
  }
  return PointSet::encode(x, y, kBlobLayout);
}

ErmOptions small_erm(std::size_t steps) {
  ErmOptions o;
  o.steps = steps;
  o.hidden = 8;
  return o;
}

// Direction of the gradient of logit(1) - logit(0) at the origin.
double boundary_angle(const ModelParams& theta) {
  const double h = 1e-6;
  auto margin = [&](double a, double b) {
    const Matrix l = classifier_logits(unpack(theta), Matrix::from_rows({{a, b}}));
    return l(0, 1) - l(0, 0);
  };
  const double gx = (margin(h, 0) - margin(-h, 0)) / (2 * h);
  const double gy = (margin(0, h) - margin(0, -h)) / (2 * h);
  return std::atan2(gy, gx);
}

}  // namespace

TEST(SolveErm, ZeroStepsReturnsInit) {
  const auto data = two_blobs(1, 10);
  const auto init = init_classifier({2, 8, 2}, RngStream(1, 1));
  EXPECT_EQ(solve_erm(data, init, small_erm(0)).values, init.values);
}

TEST(SolveErm, SeparableBlobsReachFullTrainingAccuracy) {
  const auto data = two_blobs(2, 50);
  const auto theta = solve_erm(data, init_classifier({2, 8, 2}, RngStream(2, 1)), small_erm(500));
  const Matrix p = predict_proba(theta, data.features());
  const Matrix y = data.labels();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const std::size_t pred = p(i, 1) > p(i, 0) ? 1 : 0;
    EXPECT_EQ(y(i, pred), 1.0) << "row " << i;
  }
}

TEST(SolveErm, DeterministicAndValidated) {
  const auto data = two_blobs(3, 20);
  const auto init = init_classifier({2, 8, 2}, RngStream(3, 1));
  ErmOptions o = small_erm(100);
  o.batch = 8;
  EXPECT_EQ(solve_erm(data, init, o, RngStream(3, 2)).values, solve_erm(data, init, o, RngStream(3, 2)).values);
  EXPECT_THROW(solve_erm(PointSet(Matrix(0, 4), kBlobLayout), init, o), ProtocolError);
  EXPECT_THROW(solve_erm(data, init_classifier({3, 8, 2}, RngStream(3, 1)), o), ShapeError);
}

TEST(DrawMpSample, ZeroPseudoPointsIsPlainErm) {
  const auto data = two_blobs(4, 20);
  const auto gp = make_generator(kBlobLayout, RngStream(4, 1));
  const RngStream draw(4, 2);
  const auto opts = small_erm(200);
  const auto erm = solve_erm(data, init_classifier(classifier_shape(kBlobLayout, opts), init_stream(draw)), opts,
                             order_stream(draw));
  EXPECT_EQ(draw_mp_sample(data, gp, 0, draw, opts).values, erm.values);
}

TEST(DrawMpSample, SameStreamSameDraw) {
  const auto data = two_blobs(5, 20);
  const auto gp = make_generator(kBlobLayout, RngStream(5, 1));
  const auto opts = small_erm(100);
  EXPECT_EQ(draw_mp_sample(data, gp, 10, RngStream(5, 2), opts).values,
            draw_mp_sample(data, gp, 10, RngStream(5, 2), opts).values);
}

TEST(DrawMpSample, DrawsAreDiverse) {
  const auto data = two_blobs(6, 20);
  const auto gp = make_generator(kBlobLayout, RngStream(6, 1));
  const auto samples = draw_mp_samples(data, gp, 40, 16, RngStream(6, 2), small_erm(300));
  ASSERT_EQ(samples.size(), 16u);
  double mean = 0.0;
  std::vector<double> angles;
  for (const auto& m : samples.members) angles.push_back(boundary_angle(m));
  for (double a : angles) mean += a / 16.0;
  double var = 0.0;
  for (double a : angles) var += (a - mean) * (a - mean) / 15.0;
  EXPECT_GT(std::sqrt(var), 0.0);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j) EXPECT_NE(samples.members[i].values, samples.members[j].values);
}

TEST(DrawMpSample, ParallelMatchesSerial) {
  const auto data = two_blobs(7, 10);
  const auto gp = make_generator(kBlobLayout, RngStream(7, 1));
  const auto a = draw_mp_samples(data, gp, 8, 6, RngStream(7, 2), small_erm(50), Provenance::MP, 1);
  const auto b = draw_mp_samples(data, gp, 8, 6, RngStream(7, 2), small_erm(50), Provenance::MP, 3);
  for (std::size_t r = 0; r < 6; ++r) EXPECT_EQ(a.members[r].values, b.members[r].values);
}

TEST(Ensemble, SingleMemberEqualsItsSoftmax) {
  const auto theta = init_classifier({2, 8, 2}, RngStream(8, 1));
  const PosteriorSamples s{Provenance::MP, {theta}, {0}};
  const Matrix x = Matrix::from_rows({{0.5, -1.0}, {2.0, 3.0}});
  EXPECT_TRUE(bitwise_equal(ensemble_predict(s, x), predict_proba(theta, x)));
}

TEST(Ensemble, AveragesMirroredLogits) {
  // Zero hidden layer, output bias +-a: the two members predict mirrored distributions.
  const ClassifierShape shape{2, 1, 2};
  ModelParams plus{shape, std::vector<double>(shape.parameter_count(), 0.0)};
  ModelParams minus = plus;
  plus.values[5] = 1.3;
  minus.values[5] = -1.3;
  const PosteriorSamples s{Provenance::MP, {plus, minus}, {0, 1}};
  const auto p = ensemble_predict(s, std::vector<double>{0.0, 0.0});
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(Ensemble, ConfidenceBoundedByMembersAndRowsSumToOne) {
  const auto data = two_blobs(9, 20);
  const auto gp = make_generator(kBlobLayout, RngStream(9, 1));
  const auto samples = draw_mp_samples(data, gp, 20, 8, RngStream(9, 2), small_erm(100));
  RngStream rng(9, 3);
  const Matrix x = scale(sample_gaussian(rng, 40, 2), 3.0);
  const Matrix p = ensemble_predict(samples, x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double total = 0.0, conf = 0.0, member_max = 0.0;
    for (double v : p.row(i)) {
      total += v;
      conf = std::max(conf, v);
    }
    for (const auto& m : samples.members) {
      const Matrix pm = predict_proba(m, slice_rows(x, i, 1));
      member_max = std::max({member_max, pm(0, 0), pm(0, 1)});
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_LE(conf, member_max + 1e-15);
  }
}

TEST(Ensemble, EmptyListThrows) {
  EXPECT_THROW(ensemble_predict(PosteriorSamples{}, Matrix(1, 2)), ProtocolError);
}

TEST(Classifier, PackUnpackRoundTrip) {
  const auto theta = init_classifier({3, 4, 5}, RngStream(10, 1));
  EXPECT_EQ(theta.size(), 3u * 4 + 4 + 4 * 5 + 5);
  EXPECT_EQ(pack(theta.shape, unpack(theta)).values, theta.values);
}
