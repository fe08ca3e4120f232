#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmp/error.hpp"
#include "fmp/matrix.hpp"
#include "fmp/parallel.hpp"
#include "fmp/predictive.hpp"
#include "fmp/rng.hpp"
#include "fmp/setattn.hpp"
#include "fmp/wire.hpp"

namespace fmp {

inline constexpr double kCovarianceFloor = 1e-6;

// One client's private state. `rng` drives client-local randomness (base sets, batches);
// `shared` is the broadcast seed from which every client derives the same r-th initial
// model, so that r-th draws of different clients start from a common point.
struct ClientState {
  std::uint32_t id = 0;
  PointSet data;
  RngStream rng{0, 0};
  RngStream shared{0, 0};
};

struct CompressedUpload {
  std::uint32_t client_id = 0;
  std::uint16_t version = 1;
  std::uint64_t seed_metadata = 0;
  Matrix payload;  // s x d

  std::size_t s() const { return payload.rows(); }
  std::size_t d() const { return payload.cols(); }
};

struct SampleUpload {
  std::uint32_t client_id = 0;
  std::uint64_t seed_metadata = 0;
  PosteriorSamples draws;
  std::vector<double> covariance;  // diagonal, entries >= floor
};

// ---- covariance and consensus ----

// Per-coordinate unbiased sample variance (Welford), clamped below at `floor`.
inline std::vector<double> estimate_covariance(const PosteriorSamples& samples, double floor = kCovarianceFloor) {
  if (samples.members.size() < 2) throw ProtocolError("estimate_covariance: need at least 2 samples");
  const std::size_t p = samples.members.front().size();
  std::vector<double> mean(p, 0.0), m2(p, 0.0);
  double count = 0.0;
  for (const auto& s : samples.members) {
    if (s.size() != p) throw ProtocolError("estimate_covariance: dimension mismatch");
    count += 1.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double delta = s.values[j] - mean[j];
      mean[j] += delta / count;
      m2[j] += delta * (s.values[j] - mean[j]);
    }
  }
  std::vector<double> var(p);
  for (std::size_t j = 0; j < p; ++j) var[j] = std::max(m2[j] / (count - 1.0), floor);
  return var;
}

namespace detail {
inline const ModelParams& pick_draw(const SampleUpload& u, std::size_t r) {
  if (r >= u.draws.members.size()) throw ProtocolError("upload has no draw " + std::to_string(r));
  return u.draws.members[r];
}

inline void check_uploads(std::span<const SampleUpload> uploads, std::size_t r, const char* op) {
  if (uploads.empty()) throw ProtocolError(std::string(op) + ": no uploads");
  const auto& ref = pick_draw(uploads.front(), r);
  for (const auto& u : uploads) {
    const auto& t = pick_draw(u, r);
    if (t.size() != ref.size() || !(t.shape == ref.shape)) throw ProtocolError(std::string(op) + ": dimension mismatch");
  }
}
}  // namespace detail

// theta = (sum_m Sigma_m^-1)^-1 sum_m Sigma_m^-1 theta_m with diagonal Sigma_m, using the
// r-th draw of every upload.
inline ModelParams cfmp_aggregate(std::span<const SampleUpload> uploads, std::size_t r = 0) {
  detail::check_uploads(uploads, r, "cfmp_aggregate");
  const auto& ref = detail::pick_draw(uploads.front(), r);
  const std::size_t p = ref.size();
  std::vector<double> precision(p, 0.0), weighted(p, 0.0);
  for (const auto& u : uploads) {
    if (u.covariance.size() != p) throw ProtocolError("cfmp_aggregate: covariance dimension mismatch");
    const auto& theta = detail::pick_draw(u, r).values;
    for (std::size_t j = 0; j < p; ++j) {
      const double w = 1.0 / u.covariance[j];
      precision[j] += w;
      weighted[j] += w * theta[j];
    }
  }
  ModelParams out{ref.shape, std::vector<double>(p)};
  for (std::size_t j = 0; j < p; ++j) out.values[j] = weighted[j] / precision[j];
  return out;
}

// Aggregates draw r for every r the uploads share.
inline PosteriorSamples cfmp_aggregate_all(std::span<const SampleUpload> uploads) {
  if (uploads.empty()) throw ProtocolError("cfmp_aggregate_all: no uploads");
  std::size_t count = uploads.front().draws.size();
  for (const auto& u : uploads) count = std::min(count, u.draws.size());
  PosteriorSamples out;
  out.provenance = Provenance::CFMP;
  for (std::size_t r = 0; r < count; ++r) {
    out.members.push_back(cfmp_aggregate(uploads, r));
    out.seeds.push_back(r);
  }
  return out;
}

// Unweighted mean of the r-th draw of every client.
inline ModelParams cann_average(std::span<const SampleUpload> uploads, std::size_t r = 0) {
  detail::check_uploads(uploads, r, "cann_average");
  const auto& ref = detail::pick_draw(uploads.front(), r);
  std::vector<double> acc(ref.size(), 0.0);
  for (const auto& u : uploads) {
    const auto& theta = detail::pick_draw(u, r).values;
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += theta[j];
  }
  for (double& v : acc) v /= static_cast<double>(uploads.size());
  return {ref.shape, std::move(acc)};
}

// ---- client side ----

inline RngStream shared_init_stream(const ClientState& c, std::size_t r) { return init_stream(c.shared.derive(r)); }

inline SampleUpload make_sample_upload(std::uint32_t client_id, std::uint64_t seed_metadata, PosteriorSamples draws,
                                       double floor = kCovarianceFloor) {
  SampleUpload u;
  u.client_id = client_id;
  u.seed_metadata = seed_metadata;
  u.covariance = estimate_covariance(draws, floor);
  u.draws = std::move(draws);
  return u;
}

// R local martingale-posterior draws on the client's data, plus their diagonal covariance.
// Draw r uses the client stream rng.derive(r) and the shared r-th initial model.
inline SampleUpload local_mp_upload(const ClientState& c, const GeneratorParams& gp, std::size_t draws,
                                    std::size_t n_prime, const ErmOptions& opts, std::size_t workers = 0) {
  if (draws < 2) throw ProtocolError("local_mp_upload: need R >= 2 draws for a covariance estimate");
  if (c.data.empty()) throw ProtocolError("local_mp_upload: client has no data");
  PosteriorSamples samples;
  samples.provenance = Provenance::LMP;
  samples.members.resize(draws);
  samples.seeds.resize(draws);
  const ClassifierShape shape = classifier_shape(gp.layout, opts);
  parallel_for(
      draws,
      [&](std::size_t r) {
        const RngStream draw = c.rng.derive(r);
        samples.members[r] =
            draw_mp_sample(c.data, gp, n_prime, draw, opts, init_classifier(shape, shared_init_stream(c, r)));
        samples.seeds[r] = draw.stream_id();
      },
      workers);
  return make_sample_upload(c.id, c.rng.seed(), std::move(samples));
}

// A single locally trained model (no pseudo-data), as used by consensus averaging.
inline SampleUpload local_ann_upload(const ClientState& c, const ErmOptions& opts) {
  if (c.data.empty()) throw ProtocolError("local_ann_upload: client has no data");
  const ClassifierShape shape{c.data.layout().features, opts.hidden, c.data.layout().classes};
  const RngStream draw = c.rng.derive(0);
  SampleUpload u;
  u.client_id = c.id;
  u.seed_metadata = c.rng.seed();
  u.draws.provenance = Provenance::LANN;
  u.draws.members.push_back(
      solve_erm(c.data, init_classifier(shape, shared_init_stream(c, 0)), opts, order_stream(draw)));
  u.draws.seeds.push_back(draw.stream_id());
  u.covariance.assign(shape.parameter_count(), kCovarianceFloor);
  return u;
}

inline CompressedUpload client_compress_upload(const ClientState& c, const EmbedderParams& phi) {
  if (c.data.empty()) throw ProtocolError("client_compress_upload: client has no data");
  CompressedUpload u;
  u.client_id = c.id;
  u.seed_metadata = c.rng.seed();
  u.payload = pma_compress(c.data, phi).points();
  return u;
}

// ---- server side ----

// Union of the compressed sets, canonically ordered by (client-id, row).
inline PointSet aggregate_uploads(std::span<const CompressedUpload> uploads, const PointLayout& layout) {
  if (uploads.empty()) throw ProtocolError("fmp: no uploads");
  std::vector<const CompressedUpload*> order;
  for (const auto& u : uploads) {
    if (u.d() != layout.width()) throw ProtocolError("fmp: upload width does not match the generator layout");
    order.push_back(&u);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const CompressedUpload* a, const CompressedUpload* b) { return a->client_id < b->client_id; });
  std::vector<Matrix> parts;
  for (const auto* u : order) parts.push_back(u->payload);
  return {concat_rows(std::span<const Matrix>(parts)), layout};
}

// The ERM training set the server would fit: compressed union plus decoded pseudo-points.
inline PointSet fmp_training_set(std::span<const CompressedUpload> uploads, const GeneratorParams& gp,
                                 std::size_t n_prime, const RngStream& rng) {
  const PointSet z = aggregate_uploads(uploads, gp.layout);
  if (n_prime == 0) return z;
  const Matrix base = sample_base_set(rng, n_prime, gp.layout.width());
  const Matrix gen = normalize_labels(isab_generate(z.points(), base, gp.weights), gp.layout);
  return {concat_rows(z.points(), gen), gp.layout};
}

// One FMP draw: the server treats the compressed union as its observed set.
inline ModelParams fmp_sample(std::span<const CompressedUpload> uploads, const GeneratorParams& gp,
                              std::size_t n_prime, const RngStream& rng, const ErmOptions& opts) {
  return draw_mp_sample(aggregate_uploads(uploads, gp.layout), gp, n_prime, rng, opts);
}

inline PosteriorSamples fmp_samples(std::span<const CompressedUpload> uploads, const GeneratorParams& gp,
                                    std::size_t n_prime, std::size_t count, const RngStream& rng,
                                    const ErmOptions& opts, std::size_t workers = 0) {
  return draw_mp_samples(aggregate_uploads(uploads, gp.layout), gp, n_prime, count, rng, opts, Provenance::FMP,
                         workers);
}

// ---- wire formats ----

inline constexpr std::uint16_t kUploadVersion = 1;

// "FMPU" | version u16 | client-id u32 | s u32 | d u32 | seed-metadata u64
//        | payload s*d f64 row-major | crc32
inline wire::Bytes encode_upload(const CompressedUpload& u) {
  if (!all_finite(u.payload)) throw WireError("encode_upload: non-finite payload");
  wire::Writer w;
  w.magic("FMPU");
  w.u16(u.version);
  w.u32(u.client_id);
  w.u32(static_cast<std::uint32_t>(u.s()));
  w.u32(static_cast<std::uint32_t>(u.d()));
  w.u64(u.seed_metadata);
  w.f64s(u.payload.values());
  return std::move(w).finish();
}

inline CompressedUpload decode_upload(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.check_crc();
  r.expect_magic("FMPU");
  CompressedUpload u;
  u.version = r.u16();
  if (u.version != kUploadVersion) throw FormatError("unsupported upload version", 4);
  u.client_id = r.u32();
  const std::uint32_t s = r.u32();
  const std::uint32_t d = r.u32();
  u.seed_metadata = r.u64();
  u.payload = Matrix(s, d, r.f64s(static_cast<std::size_t>(s) * d));
  r.expect_end();
  return u;
}

// "FMPS" | version u16 | client-id u32 | R u32 | features u32 | hidden u32 | classes u32
//        | provenance u8 | seed-metadata u64 | draws R*P f64 | covariance P f64 | crc32
inline wire::Bytes encode_sample_upload(const SampleUpload& u) {
  if (u.draws.members.empty()) throw WireError("encode_sample_upload: no draws");
  const ClassifierShape shape = u.draws.members.front().shape;
  wire::Writer w;
  w.magic("FMPS");
  w.u16(kUploadVersion);
  w.u32(u.client_id);
  w.u32(static_cast<std::uint32_t>(u.draws.size()));
  w.u32(static_cast<std::uint32_t>(shape.features));
  w.u32(static_cast<std::uint32_t>(shape.hidden));
  w.u32(static_cast<std::uint32_t>(shape.classes));
  w.u8(static_cast<std::uint8_t>(u.draws.provenance));
  w.u64(u.seed_metadata);
  for (const auto& m : u.draws.members) {
    if (!(m.shape == shape)) throw WireError("encode_sample_upload: draws disagree on shape");
    w.f64s(m.values);
  }
  if (u.covariance.size() != shape.parameter_count()) throw WireError("encode_sample_upload: covariance length");
  w.f64s(u.covariance);
  return std::move(w).finish();
}

inline SampleUpload decode_sample_upload(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.check_crc();
  r.expect_magic("FMPS");
  if (r.u16() != kUploadVersion) throw FormatError("unsupported sample-upload version", 4);
  SampleUpload u;
  u.client_id = r.u32();
  const std::uint32_t count = r.u32();
  ClassifierShape shape;
  shape.features = r.u32();
  shape.hidden = r.u32();
  shape.classes = r.u32();
  const std::size_t prov_at = r.offset();
  const std::uint8_t prov = r.u8();
  if (prov > static_cast<std::uint8_t>(Provenance::LANN)) throw FormatError("unknown provenance tag", prov_at);
  u.draws.provenance = static_cast<Provenance>(prov);
  u.seed_metadata = r.u64();
  const std::size_t p = shape.parameter_count();
  for (std::uint32_t i = 0; i < count; ++i) {
    u.draws.members.push_back({shape, r.f64s(p)});
    u.draws.seeds.push_back(i);
  }
  u.covariance = r.f64s(p);
  r.expect_end();
  return u;
}

// Debug views; not a normative format.
inline nlohmann::json to_json(const CompressedUpload& u) {
  nlohmann::json j;
  j["magic"] = "FMPU";
  j["version"] = u.version;
  j["client_id"] = u.client_id;
  j["s"] = u.s();
  j["d"] = u.d();
  j["seed_metadata"] = u.seed_metadata;
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < u.s(); ++i) rows.push_back(std::vector<double>(u.payload.row(i).begin(), u.payload.row(i).end()));
  j["payload"] = rows;
  return j;
}

inline nlohmann::json to_json(const SampleUpload& u) {
  nlohmann::json j;
  j["magic"] = "FMPS";
  j["client_id"] = u.client_id;
  j["seed_metadata"] = u.seed_metadata;
  j["provenance"] = to_string(u.draws.provenance);
  j["draws"] = u.draws.size();
  if (!u.draws.members.empty()) {
    const auto& s = u.draws.members.front().shape;
    j["shape"] = {s.features, s.hidden, s.classes};
  }
  auto draws = nlohmann::json::array();
  for (const auto& m : u.draws.members) draws.push_back(m.values);
  j["theta"] = draws;
  j["covariance"] = u.covariance;
  return j;
}

}  // namespace fmp
