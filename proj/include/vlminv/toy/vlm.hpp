#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"
#include "vlminv/nn.hpp"
#include "vlminv/toy/dataset.hpp"

namespace vlminv::toy {

struct ToyVlmConfig {
  ImageShape image_shape{32, 32, 3};
  int patch = 8;
  int model_dim = 32;
  int mlp_dim = 64;
  int max_prompt = 8;
  int max_context = 8;
  /// Logits are logit_scale * head * f + bias on the unit-norm features f.
  double logit_scale = 16.0;

  int patch_dim() const { return patch * patch * image_shape.channels; }
  int num_patches() const { return (image_shape.height / patch) * (image_shape.width / patch); }
  int max_length() const { return num_patches() + max_prompt + 1 + max_context; }
};

struct ToyVlmWeights {
  Matrix token_embedding;  // D x V
  Matrix position;         // D x max_length
  Matrix patch_proj;       // D x patch_dim
  Matrix patch_bias;       // D x 1
  Matrix wq, wk, wv, wo;   // D x D
  Matrix mlp_in;           // H x D
  Matrix mlp_in_bias;      // H x 1
  Matrix mlp_out;          // D x H
  Matrix mlp_out_bias;     // D x 1
  Matrix head;             // V x D
  Matrix head_bias;        // V x 1

  std::vector<nn::ParamRef> refs();
  Index parameter_count();
};

/// Micro vision-language model: image patches, prompt tokens, <bos> and the
/// answer context form one sequence read by a single causal attention block
/// with a tanh MLP. The block output at a position is the penultimate
/// feature; a linear head maps it to next-token logits.
class ToyVlm final : public TargetModel {
 public:
  ToyVlm(ToyVlmConfig config, std::shared_ptr<const Vocabulary> vocab, ToyVlmWeights weights, std::uint64_t seed);

  static ToyVlm initialize(const ToyVlmConfig& config, std::shared_ptr<const Vocabulary> vocab, std::uint64_t seed);

  const std::shared_ptr<const Vocabulary>& vocabulary() const override { return vocab_; }
  ImageShape input_shape() const override { return config_.image_shape; }
  Index penultimate_dim() const override { return config_.model_dim; }
  Index max_context() const override { return config_.max_context; }
  std::unique_ptr<ModelPass> forward(const TokenSequence& prompt, const ImageTensor& image,
                                     std::span<const TokenId> context) const override;
  std::vector<TokenId> greedy_decode(const TokenSequence& prompt, const ImageTensor& image,
                                     Index max_len) const override;
  std::string fingerprint() const override { return fingerprint_; }

  /// Teacher-forced cross-entropy over `answer` followed by <eos>. Adds the
  /// parameter gradient into `grads` when given. Returns the summed loss and
  /// the number of argmax-correct positions.
  struct SampleStats {
    Real loss = 0;
    int correct = 0;
    int positions = 0;
  };
  SampleStats accumulate(const TokenSequence& prompt, const ImageTensor& image, const TokenSequence& answer,
                         ToyVlmWeights* grads) const;

  const ToyVlmConfig& config() const { return config_; }
  ToyVlmWeights& mutable_weights() { return weights_; }
  const ToyVlmWeights& weights() const { return weights_; }
  std::uint64_t seed() const { return seed_; }
  /// Recomputes the fingerprint after in-place weight edits (training).
  void refresh_fingerprint();

  nlohmann::json to_json() const;
  static ToyVlm from_json(const nlohmann::json& j);

  struct Activations;

 private:
  friend class ToyVlmPass;

  Matrix patches_of(const ImageTensor& image) const;
  std::shared_ptr<Activations> run(const Matrix& patch_embed, const Matrix& patches, const TokenSequence& prompt,
                                   std::span<const TokenId> context) const;
  Matrix embed_patches(const Matrix& patches) const;
  /// Returns d(pixels) when requested; accumulates weight gradients when `grads` is set.
  void backward(const Activations& act, const Matrix& d_out, ToyVlmWeights* grads, Vector* d_pixels) const;

  ToyVlmConfig config_;
  std::shared_ptr<const Vocabulary> vocab_;
  ToyVlmWeights weights_;
  std::uint64_t seed_;
  std::vector<Index> patch_source_;  // flat patch-matrix index -> pixel index
  std::string fingerprint_;
};

struct VlmTrainOptions {
  int epochs = 200;
  int batch_size = 16;
  Real learning_rate = 3e-3;
  std::uint64_t seed = 1;
  Real accuracy_threshold = 0.99;
  Real pixel_noise = 0.05;  // Gaussian input noise, clamped to [0, 1]
};

struct TrainLog {
  std::vector<std::string> lines;
  Real final_loss = 0;
  Real accuracy = 0;
  bool reached_threshold = false;
};

/// Fits a fresh ToyVlm to the split. Never fails silently: when the accuracy
/// threshold is missed the log carries an UNDER-TRAINED warning.
ToyVlm train_toy_vlm(const std::vector<Triple>& split, const Dataset& dataset, const ToyVlmConfig& config,
                     const VlmTrainOptions& options, TrainLog* log = nullptr);

/// Teacher-forced accuracy over answer tokens and <eos>.
Real teacher_forced_accuracy(const ToyVlm& model, const std::vector<Triple>& split, const Dataset& dataset);

}  // namespace vlminv::toy
