// One federated round on a synthetic task: every client compresses its data, the
// messages go through the FMPU codec, and the server draws posterior samples.
#include <cstdio>
#include <vector>

#include "fmp/data.hpp"
#include "fmp/eval.hpp"
#include "fmp/federated.hpp"
#include "fmp/metatrain.hpp"

int main() {
  using namespace fmp;

  ExperimentConfig cfg;
  cfg.task.clients = 4;
  cfg.task.n = 24;
  cfg.task.center_scale = 1.0;
  cfg.meta.epochs = 100;
  cfg.meta_tasks = 8;
  cfg.n_prime = 12;
  cfg.erm.steps = 200;

  const auto gp = experiment_generator(cfg);
  ExperimentResult log;
  const auto phi = train_embedder(cfg, gp, &log);
  std::printf("meta-training loss %.4f -> %.4f\n", log.meta_trace.front(), log.meta_trace.back());

  const auto data = eval_data(cfg, 42);
  const RngStream root(42, 0);
  std::vector<CompressedUpload> received;
  std::size_t wire_bytes = 0;
  for (std::size_t m = 0; m < data.clients.size(); ++m) {
    const ClientState client{static_cast<std::uint32_t>(m), data.clients[m], root.derive(100 + m), root.derive(99)};
    const auto bytes = encode_upload(client_compress_upload(client, phi));
    wire_bytes += bytes.size();
    received.push_back(decode_upload(bytes));
  }
  std::printf("%zu clients sent %zu bytes in total\n", received.size(), wire_bytes);

  const auto samples = fmp_samples(received, gp, cfg.n_prime, 8, root.derive(7), cfg.erm);
  const PredictionBatch batch{ensemble_predict(samples, data.test.features), data.test.labels};
  std::printf("FMP ensemble of %zu: ACC %.4f  ECE %.4f\n", samples.size(), accuracy(batch), ece(batch));
  return 0;
}
