#include "vlminv/toy/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv::toy {

namespace {

constexpr std::array<std::array<Real, 3>, 8> kPalette{{
    {0.90, 0.15, 0.15},  // red
    {0.20, 0.80, 0.25},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.95, 0.85, 0.20},  // yellow
    {0.85, 0.25, 0.80},  // magenta
    {0.20, 0.80, 0.85},  // cyan
    {0.95, 0.95, 0.95},  // white
    {0.12, 0.12, 0.15},  // near black
}};

Real shape_distance(ShapeKind kind, Real dx, Real dy, Real size) {
  switch (kind) {
    case ShapeKind::kCircle:
      return std::hypot(dx, dy) - size;
    case ShapeKind::kSquare:
      return std::max(std::abs(dx), std::abs(dy)) - 0.85 * size;
    case ShapeKind::kDiamond:
      return (std::abs(dx) + std::abs(dy) - 1.25 * size) / std::sqrt(2.0);
    case ShapeKind::kRing:
      return std::abs(std::hypot(dx, dy) - size) - 2.0;
  }
  return 0;
}

std::vector<std::string> draw_names(int count, const DatasetConfig& config) {
  Rng rng(derive_seed(config.seed, "names"));
  std::uniform_int_distribution<int> len(config.min_name_tokens, config.max_name_tokens);
  std::uniform_int_distribution<std::size_t> pick(0, syllables().size() - 1);
  std::vector<std::vector<std::string>> names;
  auto is_prefix = [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
    return a.size() <= b.size() && std::equal(a.begin(), a.end(), b.begin());
  };
  std::size_t attempts = 0;
  while (static_cast<int>(names.size()) < count) {
    if (++attempts > 1000000) throw ConfigError("cannot draw enough unique identity names");
    std::vector<std::string> name(static_cast<std::size_t>(len(rng)));
    for (auto& s : name) s = syllables()[pick(rng)];
    // No name may be a token prefix of another, so substring matching stays unambiguous.
    const bool clash = std::any_of(names.begin(), names.end(),
                                   [&](const auto& other) { return is_prefix(other, name) || is_prefix(name, other); });
    if (!clash) names.push_back(std::move(name));
  }
  std::vector<std::string> out;
  for (const auto& n : names) {
    std::string joined;
    for (const auto& s : n) joined += (joined.empty() ? "" : " ") + s;
    out.push_back(joined);
  }
  return out;
}

}  // namespace

std::string to_string(Split split) { return split == Split::kPrivate ? "private" : "public"; }

std::string Triple::image_path() const {
  std::ostringstream p;
  p << "images/" << to_string(split) << "/id" << identity_id << "_s" << sample_index << ".png";
  return p.str();
}

const SyntheticIdentitySpec& Dataset::identity(int identity_id) const {
  for (const auto* group : {&private_identities, &public_identities})
    for (const auto& s : *group)
      if (s.identity_id == identity_id) return s;
  throw ConfigError("unknown identity " + std::to_string(identity_id));
}

const std::vector<std::string>& syllables() {
  static const std::vector<std::string> kSyllables{"Ka", "Lo", "Mi", "Ren", "Su", "Ta",
                                                   "Vi", "No", "Ze", "Ha", "Yu", "Bo"};
  return kSyllables;
}

std::shared_ptr<const Vocabulary> toy_vocabulary(const std::string& prompt) {
  std::vector<std::string> words;
  std::istringstream in(prompt);
  for (std::string w; in >> w;)
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  for (const auto& s : syllables())
    if (std::find(words.begin(), words.end(), s) == words.end()) words.push_back(s);
  return std::make_shared<const Vocabulary>(words);
}

IdentityAttributes derive_attributes(int identity_id, std::uint64_t seed) {
  // Identities walk a seeded permutation of the ordered colour pairs, taking a
  // new shape on each pass, so the first `pairs` identities never share a
  // colour pair and no two identities below 4 * pairs share a combination.
  const int colours = static_cast<int>(kPalette.size());
  const int pairs = colours * (colours - 1);
  std::vector<int> perm(static_cast<std::size_t>(pairs));
  std::iota(perm.begin(), perm.end(), 0);
  Rng perm_rng(derive_seed(seed, "identity.pairs"));
  std::shuffle(perm.begin(), perm.end(), perm_rng);
  std::uniform_int_distribution<int> first_shape(0, 3);
  std::vector<int> shape0(static_cast<std::size_t>(pairs));
  for (auto& s : shape0) s = first_shape(perm_rng);
  const auto slot = static_cast<std::size_t>(identity_id % pairs);
  const int pair = perm[slot];

  Rng rng(derive_seed(seed, "identity", static_cast<std::uint64_t>(identity_id)));
  std::uniform_real_distribution<Real> offset(-6.0, 6.0);
  std::uniform_real_distribution<Real> size(5.0, 9.0);
  IdentityAttributes a;
  a.shape = static_cast<ShapeKind>((shape0[slot] + identity_id / pairs) % 4);
  a.foreground = pair % colours;
  const int bg = pair / colours;
  a.background = bg >= a.foreground ? bg + 1 : bg;
  a.offset_x = offset(rng);
  a.offset_y = offset(rng);
  a.size = size(rng);
  return a;
}

ImageTensor render_sample(const SyntheticIdentitySpec& identity, int sample_index, std::uint64_t seed,
                          ImageShape shape) {
  Rng rng(derive_seed(seed, "sample",
                      static_cast<std::uint64_t>(identity.identity_id) * 1000003ULL +
                          static_cast<std::uint64_t>(sample_index)));
  std::uniform_real_distribution<Real> jitter(-1.5, 1.5);
  std::uniform_real_distribution<Real> size_jitter(-0.75, 0.75);
  std::uniform_real_distribution<Real> tint(-0.04, 0.04);
  const auto& a = identity.attributes;
  const Real cx = 0.5 * shape.width + a.offset_x + jitter(rng);
  const Real cy = 0.5 * shape.height + a.offset_y + jitter(rng);
  const Real size = a.size + size_jitter(rng);
  std::array<Real, 3> fg{}, bg{};
  for (int c = 0; c < 3; ++c) fg[c] = kPalette[a.foreground][c] + tint(rng);
  for (int c = 0; c < 3; ++c) bg[c] = kPalette[a.background][c] + tint(rng);

  ImageTensor img(shape);
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      const Real d = shape_distance(a.shape, x + 0.5 - cx, y + 0.5 - cy, size);
      const Real cover = std::clamp(0.5 - d, 0.0, 1.0);
      for (int c = 0; c < shape.channels; ++c) {
        const int k = std::min(c, 2);
        img.at(y, x, c) = std::clamp(bg[k] * (1.0 - cover) + fg[k] * cover, 0.0, 1.0);
      }
    }
  }
  return img;
}

Dataset build_dataset(const DatasetConfig& config) {
  if (config.num_identities < 2) throw ConfigError("num_identities must be at least 2");
  if (config.per_identity < 1 || config.public_per_identity < 1) throw ConfigError("per_identity must be at least 1");
  if (config.num_public_identities < 1) throw ConfigError("public split needs at least one identity");
  Dataset ds;
  ds.config = config;
  ds.vocabulary = toy_vocabulary(config.prompt);
  const int total = config.num_identities + config.num_public_identities;
  const auto names = draw_names(total, config);
  for (int id = 0; id < total; ++id) {
    SyntheticIdentitySpec spec{id, derive_attributes(id, config.seed), names[static_cast<std::size_t>(id)]};
    (id < config.num_identities ? ds.private_identities : ds.public_identities).push_back(std::move(spec));
  }
  auto fill = [&](const std::vector<SyntheticIdentitySpec>& ids, int per, Split split, std::vector<Triple>& out) {
    for (const auto& spec : ids)
      for (int s = 0; s < per; ++s)
        out.push_back({config.prompt, render_sample(spec, s, config.seed, config.image_shape), spec.name,
                       spec.identity_id, s, split});
  };
  fill(ds.private_identities, config.per_identity, Split::kPrivate, ds.private_split);
  fill(ds.public_identities, config.public_per_identity, Split::kPublic, ds.public_split);
  return ds;
}

std::string manifest(const Dataset& dataset) {
  std::ostringstream out;
  for (const auto* split : {&dataset.private_split, &dataset.public_split})
    for (const auto& t : *split)
      out << t.image_path() << '\t' << t.prompt << '\t' << t.answer << '\t' << t.identity_id << '\t'
          << to_string(t.split) << '\n';
  return out.str();
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  for (const auto* split : {&dataset.private_split, &dataset.public_split})
    for (const auto& t : *split) write_png(dir / t.image_path(), to_raster(t.image));
  write_file_atomic(dir / "manifest.tsv", manifest(dataset));
}

}  // namespace vlminv::toy
