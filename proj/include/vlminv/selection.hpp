#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"
#include "vlminv/losses.hpp"
#include "vlminv/rng.hpp"
#include "vlminv/strategies.hpp"

namespace vlminv {

/// Mean of the per-token identity losses over the teacher-forced answer.
Real sequence_loss(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                   const TokenSequence& answer, const IdentityLoss& loss);

struct ScoredLatent {
  LatentVector latent;
  Real loss = 0;
  Index pool_index = 0;
};

/// Samples `pool_size` standard-normal latents (latent j seeded with
/// derive_seed(seed, "pool", j)) and scores each with sequence_loss.
std::vector<ScoredLatent> score_pool(const AttackTarget& target, const IdentityLoss& loss, int pool_size,
                                     std::uint64_t seed);

/// The `n` lowest-loss entries, ascending (ties by pool index).
std::vector<ScoredLatent> lowest_n(std::vector<ScoredLatent> pool, int n);

std::vector<ScoredLatent> initial_select(const AttackTarget& target, const IdentityLoss& loss, int pool_size, int n,
                                         std::uint64_t seed);

/// Random flip, crop-resize and colour jitter. All-zero settings give the
/// identity transform.
struct AugmentationConfig {
  Real flip_probability = 0.5;
  Real min_crop_scale = 0.85;  // crop side as a fraction of the image side, drawn in [min, 1]
  Real brightness = 0.1;       // additive offset drawn in [-b, b]
  Real contrast = 0.1;         // gain drawn in [1 - c, 1 + c] around the image mean

  static AugmentationConfig identity() { return {0.0, 1.0, 0.0, 0.0}; }
  nlohmann::json to_json() const;
  static AugmentationConfig from_json(const nlohmann::json& j);
};

/// Output pixels are clamped to [0, 1].
ImageTensor augment(const ImageTensor& image, const AugmentationConfig& config, Rng& rng);

struct CandidateScore {
  int candidate_id = 0;
  Real mean_loss = 0;
};

struct FinalSelection {
  std::vector<CandidateScore> ranked;    // every candidate, best first
  std::vector<CandidateScore> selected;  // first ceil(n/2) of `ranked`
};

/// Scores each candidate's final image under `augmentations` augmentations
/// seeded by derive_seed(seed, "augment", candidate_id) and keeps the best
/// ceil(n/2) by mean loss (ties by candidate id).
FinalSelection final_select(const AttackTarget& target, const IdentityLoss& loss,
                            const std::vector<InversionResult>& candidates, int augmentations,
                            const AugmentationConfig& aug, std::uint64_t seed);

}  // namespace vlminv
