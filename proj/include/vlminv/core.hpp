#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace vlminv {

using Real = double;
using Index = Eigen::Index;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using TokenId = std::int32_t;

/// Raised when a caller breaks an operation's preconditions (shapes, ids).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for invalid user configuration (budgets, sizes, missing inputs).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a loss or gradient stops being finite.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::optional<long> step = std::nullopt)
      : std::runtime_error(what), step_(step) {}
  std::optional<long> step() const { return step_; }

 private:
  std::optional<long> step_;
};

/// Dense token table with whitespace tokenization.
///
/// Ids are dense in [0, size). The first four entries are always the
/// special tokens <pad>, <bos>, <eos>, <unk>.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;

  /// `words` are the ordinary (non-special) tokens; duplicates are rejected.
  explicit Vocabulary(const std::vector<std::string>& words);

  Index size() const { return static_cast<Index>(id_to_text_.size()); }
  const std::string& text(TokenId id) const;
  std::optional<TokenId> find(std::string_view word) const;
  bool is_special(TokenId id) const { return id >= 0 && id <= kUnk; }

  /// Whitespace split; unknown words map to <unk>.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Joins ordinary tokens with single spaces, stopping at <eos>.
  std::string decode(std::span<const TokenId> ids) const;

  const std::vector<std::string>& words() const { return id_to_text_; }

 private:
  std::vector<std::string> id_to_text_;
  std::unordered_map<std::string, TokenId> text_to_id_;
};

/// Token ids bound to the vocabulary they index.
class TokenSequence {
 public:
  TokenSequence(std::vector<TokenId> ids, std::shared_ptr<const Vocabulary> vocab);

  static TokenSequence encode(std::string_view text, std::shared_ptr<const Vocabulary> vocab);

  const std::vector<TokenId>& ids() const { return ids_; }
  std::span<const TokenId> span() const { return ids_; }
  Index size() const { return static_cast<Index>(ids_.size()); }
  bool empty() const { return ids_.empty(); }
  TokenId operator[](Index i) const { return ids_[static_cast<std::size_t>(i)]; }
  const Vocabulary& vocabulary() const { return *vocab_; }
  const std::shared_ptr<const Vocabulary>& vocabulary_ptr() const { return vocab_; }
  std::string text() const { return vocab_->decode(ids_); }

 private:
  std::vector<TokenId> ids_;
  std::shared_ptr<const Vocabulary> vocab_;
};

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  Index numel() const { return static_cast<Index>(height) * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// HWC image with pixels in [0, 1], stored row-major as (y * width + x) * channels + c.
struct ImageTensor {
  ImageShape shape;
  Vector pixels;

  ImageTensor() = default;
  ImageTensor(ImageShape s, Vector p);
  explicit ImageTensor(ImageShape s) : ImageTensor(s, Vector::Zero(s.numel())) {}

  Real& at(int y, int x, int c) { return pixels[(static_cast<Index>(y) * shape.width + x) * shape.channels + c]; }
  Real at(int y, int x, int c) const { return pixels[(static_cast<Index>(y) * shape.width + x) * shape.channels + c]; }
  bool in_range() const { return pixels.size() == 0 || (pixels.minCoeff() >= 0.0 && pixels.maxCoeff() <= 1.0); }
};

struct LatentVector {
  Vector values;
  std::uint64_t rng_seed = 0;

  Index dim() const { return values.size(); }
  bool finite() const { return values.allFinite(); }
};

/// Next-token output of the target model at one answer position.
struct ModelStep {
  Vector logits;
  Vector penultimate;
};

/// Cotangent of a scalar objective with respect to one ModelStep.
/// An empty vector stands for zero.
struct StepCotangent {
  Vector logits;
  Vector penultimate;
};

/// Recorded forward evaluation of the target model, able to pull gradients
/// back to the input image.
class ModelPass {
 public:
  virtual ~ModelPass() = default;

  /// steps()[j] predicts the token following context[0..j).
  const std::vector<ModelStep>& steps() const { return steps_; }

  /// Vector-Jacobian product: one cotangent per step (or fewer; missing
  /// trailing entries are zero). Returns d(objective)/d(pixels).
  virtual Vector pullback(std::span<const StepCotangent> cotangents) const = 0;

 protected:
  std::vector<ModelStep> steps_;
};

/// White-box autoregressive vision-language target.
///
/// Implementations are immutable once constructed; forward() may be called
/// concurrently from several threads.
class TargetModel {
 public:
  virtual ~TargetModel() = default;

  virtual const std::shared_ptr<const Vocabulary>& vocabulary() const = 0;
  virtual ImageShape input_shape() const = 0;
  virtual Index penultimate_dim() const = 0;
  /// Longest answer context the model accepts.
  virtual Index max_context() const = 0;

  /// Runs the model on (prompt, image, context) and returns |context| + 1
  /// steps, step j being conditioned on context[0..j).
  virtual std::unique_ptr<ModelPass> forward(const TokenSequence& prompt, const ImageTensor& image,
                                             std::span<const TokenId> context) const = 0;

  /// Greedy decoding until <eos> or max_len tokens. The default decodes by
  /// repeated forward() calls; models may override with a cached decoder
  /// that yields identical tokens.
  virtual std::vector<TokenId> greedy_decode(const TokenSequence& prompt, const ImageTensor& image,
                                             Index max_len) const;

  /// Content hash of the weights, used to key persisted statistics.
  virtual std::string fingerprint() const = 0;
};

class GeneratorPass {
 public:
  virtual ~GeneratorPass() = default;
  const ImageTensor& image() const { return image_; }
  /// d(objective)/d(latent) given d(objective)/d(pixels).
  virtual Vector pullback(const Vector& pixel_cotangent) const = 0;

 protected:
  ImageTensor image_;
};

/// Latent image prior G. Latents are sampled from a standard normal.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual Index latent_dim() const = 0;
  virtual ImageShape output_shape() const = 0;
  virtual std::unique_ptr<GeneratorPass> forward(const Vector& latent) const = 0;
  virtual std::string fingerprint() const = 0;
};

/// Logits and penultimate features for the token after `prefix`.
ModelStep target_step(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                      const TokenSequence& prefix);

/// Greedy answer, without the terminating <eos>.
TokenSequence generate_text(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                            Index max_len);

ImageTensor decode_latent(const Generator& generator, const LatentVector& latent);

/// Throws ContractViolation unless `image` matches the model input.
void check_image(const TargetModel& model, const ImageTensor& image);

template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  v.maxCoeff(&best);
  return best;
}

}  // namespace vlminv
