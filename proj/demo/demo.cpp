// Train a small autoencoder on AWGN, move it to a uniform-fading channel and
// adapt the MDN with ten labeled target samples per message.

#include "mdnadapt/adapt.hpp"
#include "mdnadapt/experiment.hpp"

#include <cstdio>

using namespace mdnadapt;

int main() {
  autoenc::TrainConfig training;
  training.n_ae = 10;
  training.n_ce = 5;
  training.mdn_samples = 5000;
  training.ae_samples = 50000;
  const autoenc::SystemShape shape{16, 2, 5, 100};

  const auto source_channel = channels::make_snr_channel("awgn", 14.0);
  const auto target_channel = channels::make_snr_channel("uniform_fading", 20.0);

  Rng rng(2024);
  std::printf("training source system...\n");
  auto system = experiment::train_system(shape, training, source_channel, rng);
  const auto src = experiment::finish_source(2024, source_channel, std::move(system));

  const auto adapt_set = experiment::to_target_data(channels::generate_dataset(target_channel, src.constellation, 10, rng));
  const auto test = experiment::to_target_data(channels::generate_dataset(target_channel, src.constellation, 2000, rng));

  const auto before = autoenc::evaluate_ser(autoenc::as_classifier(src.system.decoder), test.x, test.labels, shape.m);

  adapt::AdaptationConfig cfg;
  const auto result = adapt::adapt(src.mixture, src.constellation, adapt_set, cfg, &src.system.decoder);
  const auto decoder = adapt::adapted_decoder(src.system.decoder, result, src.mixture, src.constellation);
  const auto after = autoenc::evaluate_ser([&](const Matrix& x) { return decoder.probabilities(x); }, test.x, test.labels,
                                           shape.m);

  std::printf("lambda*            %g\n", result.lambda_star);
  std::printf("SER no adaptation  %.4f\n", before.ser);
  std::printf("SER adapted        %.4f\n", after.ser);
  std::printf("target CLL         %.3f -> %.3f\n", experiment::mean_cll(src.mixture, src.constellation, test),
              experiment::mean_cll(result.target, src.constellation, test));
}
