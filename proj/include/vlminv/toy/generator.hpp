#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"
#include "vlminv/nn.hpp"
#include "vlminv/toy/dataset.hpp"
#include "vlminv/toy/vlm.hpp"

namespace vlminv::toy {

struct ToyGeneratorConfig {
  int latent_dim = 64;
  int hidden = 256;
  int encoder_hidden = 256;
  ImageShape output_shape{32, 32, 3};
};

struct ToyGeneratorWeights {
  // decoder: latent -> tanh hidden -> sigmoid pixels
  Matrix dec_in, dec_in_bias, dec_out, dec_out_bias;
  // encoder (training only): pixels -> tanh hidden -> (mean, log variance)
  Matrix enc_in, enc_in_bias, enc_mean, enc_mean_bias, enc_logvar, enc_logvar_bias;

  std::vector<nn::ParamRef> refs();
};

/// Variational auto-encoder decoder used as the latent image prior. Outputs
/// pass through a sigmoid, so pixels stay in (0, 1) with non-zero gradients.
class ToyGenerator final : public Generator {
 public:
  ToyGenerator(ToyGeneratorConfig config, ToyGeneratorWeights weights, std::uint64_t seed);
  static ToyGenerator initialize(const ToyGeneratorConfig& config, std::uint64_t seed);

  Index latent_dim() const override { return config_.latent_dim; }
  ImageShape output_shape() const override { return config_.output_shape; }
  std::unique_ptr<GeneratorPass> forward(const Vector& latent) const override;
  std::string fingerprint() const override { return fingerprint_; }

  /// Posterior mean of the encoder.
  Vector encode(const ImageTensor& image) const;

  const ToyGeneratorConfig& config() const { return config_; }
  const ToyGeneratorWeights& weights() const { return weights_; }
  ToyGeneratorWeights& mutable_weights() { return weights_; }
  std::uint64_t seed() const { return seed_; }
  void refresh_fingerprint();

  nlohmann::json to_json() const;
  static ToyGenerator from_json(const nlohmann::json& j);

 private:
  ToyGeneratorConfig config_;
  ToyGeneratorWeights weights_;
  std::uint64_t seed_;
  std::string fingerprint_;
};

struct GeneratorTrainOptions {
  int epochs = 60;
  int batch_size = 32;
  Real learning_rate = 2e-3;
  Real pixel_sigma = 0.5;  // Gaussian decoder noise; sets the KL trade-off
  std::uint64_t seed = 2;
  int holdout_from_sample = 10;  // public samples with index >= this are held out
};

/// Trains on public triples with sample_index < holdout_from_sample.
ToyGenerator train_toy_generator(const std::vector<Triple>& public_split, const ToyGeneratorConfig& config,
                                 const GeneratorTrainOptions& options, TrainLog* log = nullptr);

/// Mean absolute per-pixel error of decode(encode(x)) over `images`.
Real reconstruction_error(const ToyGenerator& generator, const std::vector<const ImageTensor*>& images);

}  // namespace vlminv::toy
