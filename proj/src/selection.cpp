#include "vlminv/selection.hpp"

#include <algorithm>
#include <cmath>

namespace vlminv {

Real sequence_loss(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                   const TokenSequence& answer, const IdentityLoss& loss) {
  if (answer.empty()) throw ContractViolation("target answer must not be empty");
  const auto& ids = answer.ids();
  const auto pass = model.forward(prompt, image, std::span<const TokenId>(ids.data(), ids.size() - 1));
  Real total = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) total += loss(pass->steps()[i], ids[i], static_cast<Index>(i)).report.loss;
  return total / static_cast<Real>(ids.size());
}

std::vector<ScoredLatent> score_pool(const AttackTarget& target, const IdentityLoss& loss, int pool_size,
                                     std::uint64_t seed) {
  if (pool_size < 1) throw ConfigError("pool size must be positive");
  std::vector<ScoredLatent> pool;
  pool.reserve(static_cast<std::size_t>(pool_size));
  for (int j = 0; j < pool_size; ++j) {
    const auto s = derive_seed(seed, "pool", static_cast<std::uint64_t>(j));
    Rng rng(s);
    LatentVector w{standard_normal(target.generator.latent_dim(), rng), s};
    const auto image = target.generator.forward(w.values)->image();
    const Real l = sequence_loss(target.model, target.prompt, image, target.answer, loss);
    pool.push_back({std::move(w), l, j});
  }
  return pool;
}

std::vector<ScoredLatent> lowest_n(std::vector<ScoredLatent> pool, int n) {
  if (n < 1) throw ConfigError("candidate count must be at least 1");
  if (n > static_cast<int>(pool.size())) throw ConfigError("cannot select more candidates than the pool holds");
  const auto before = [](const ScoredLatent& a, const ScoredLatent& b) {
    return a.loss < b.loss || (a.loss == b.loss && a.pool_index < b.pool_index);
  };
  std::partial_sort(pool.begin(), pool.begin() + n, pool.end(), before);
  pool.resize(static_cast<std::size_t>(n));
  return pool;
}

std::vector<ScoredLatent> initial_select(const AttackTarget& target, const IdentityLoss& loss, int pool_size, int n,
                                         std::uint64_t seed) {
  if (n > pool_size) throw ConfigError("cannot select more candidates than the pool holds");
  return lowest_n(score_pool(target, loss, pool_size, seed), n);
}

nlohmann::json AugmentationConfig::to_json() const {
  return {{"flip_probability", flip_probability},
          {"min_crop_scale", min_crop_scale},
          {"brightness", brightness},
          {"contrast", contrast}};
}

AugmentationConfig AugmentationConfig::from_json(const nlohmann::json& j) {
  AugmentationConfig a;
  a.flip_probability = j.value("flip_probability", a.flip_probability);
  a.min_crop_scale = j.value("min_crop_scale", a.min_crop_scale);
  a.brightness = j.value("brightness", a.brightness);
  a.contrast = j.value("contrast", a.contrast);
  return a;
}

ImageTensor augment(const ImageTensor& image, const AugmentationConfig& config, Rng& rng) {
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  const int h = image.shape.height, w = image.shape.width, ch = image.shape.channels;
  const bool flip = unit(rng) < config.flip_probability;
  const Real scale = config.min_crop_scale + (1.0 - config.min_crop_scale) * unit(rng);
  const Real crop_h = scale * h, crop_w = scale * w;
  const Real top = (h - crop_h) * unit(rng), left = (w - crop_w) * unit(rng);
  const Real offset = config.brightness * (2.0 * unit(rng) - 1.0);
  const Real gain = 1.0 + config.contrast * (2.0 * unit(rng) - 1.0);
  const bool resample = scale < 1.0;

  ImageTensor out(image.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xs = flip ? w - 1 - x : x;
      for (int c = 0; c < ch; ++c) {
        Real v;
        if (!resample) {
          v = image.at(y, xs, c);
        } else {
          // bilinear sample of the crop window at the output pixel centre
          const Real sy = std::clamp(top + (y + 0.5) * crop_h / h - 0.5, 0.0, h - 1.0);
          const Real sx = std::clamp(left + (xs + 0.5) * crop_w / w - 0.5, 0.0, w - 1.0);
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const Real fy = sy - y0, fx = sx - x0;
          v = (1 - fy) * ((1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c)) +
              fy * ((1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c));
        }
        out.at(y, x, c) = v;
      }
    }
  }
  if (config.contrast != 0.0 || config.brightness != 0.0) {
    const Real mean = out.pixels.mean();
    out.pixels = ((out.pixels.array() - mean) * gain + mean + offset).matrix();
  }
  out.pixels = out.pixels.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

FinalSelection final_select(const AttackTarget& target, const IdentityLoss& loss,
                            const std::vector<InversionResult>& candidates, int augmentations,
                            const AugmentationConfig& aug, std::uint64_t seed) {
  if (candidates.empty()) throw ConfigError("final selection needs at least one candidate");
  if (augmentations < 1) throw ConfigError("augmentation count must be at least 1");
  FinalSelection sel;
  for (const auto& cand : candidates) {
    Rng rng(derive_seed(seed, "augment", static_cast<std::uint64_t>(cand.candidate_id)));
    Real total = 0;
    for (int a = 0; a < augmentations; ++a) {
      total += sequence_loss(target.model, target.prompt, augment(cand.image, aug, rng), target.answer, loss);
    }
    sel.ranked.push_back({cand.candidate_id, total / augmentations});
  }
  std::sort(sel.ranked.begin(), sel.ranked.end(), [](const CandidateScore& a, const CandidateScore& b) {
    return a.mean_loss < b.mean_loss || (a.mean_loss == b.mean_loss && a.candidate_id < b.candidate_id);
  });
  const auto keep = (candidates.size() + 1) / 2;
  sel.selected.assign(sel.ranked.begin(), sel.ranked.begin() + static_cast<std::ptrdiff_t>(keep));
  return sel;
}

}  // namespace vlminv
