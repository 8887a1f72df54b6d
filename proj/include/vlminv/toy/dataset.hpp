#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vlminv/core.hpp"

// Procedural identity VQA data: each identity is a coloured shape at a fixed
// offset, answered by a unique multi-syllable name.
namespace vlminv::toy {

enum class ShapeKind { kCircle, kSquare, kDiamond, kRing };

struct IdentityAttributes {
  ShapeKind shape = ShapeKind::kCircle;
  int foreground = 0;  // palette index
  int background = 1;  // palette index, never equal to foreground
  Real offset_x = 0;
  Real offset_y = 0;
  Real size = 6;
};

struct SyntheticIdentitySpec {
  int identity_id = 0;
  IdentityAttributes attributes;
  std::string name;
};

enum class Split { kPrivate, kPublic };
std::string to_string(Split split);

struct Triple {
  std::string prompt;
  ImageTensor image;
  std::string answer;
  int identity_id = 0;
  int sample_index = 0;
  Split split = Split::kPrivate;

  std::string image_path() const;
};

struct DatasetConfig {
  int num_identities = 16;         // private identities
  int num_public_identities = 192;  // disjoint from the private ones
  int per_identity = 32;
  int public_per_identity = 12;
  std::uint64_t seed = 7;
  ImageShape image_shape{32, 32, 3};
  std::string prompt = "Who is in the image ?";
  int min_name_tokens = 2;
  int max_name_tokens = 4;
};

struct Dataset {
  DatasetConfig config;
  std::shared_ptr<const Vocabulary> vocabulary;
  std::vector<SyntheticIdentitySpec> private_identities;
  std::vector<SyntheticIdentitySpec> public_identities;
  std::vector<Triple> private_split;
  std::vector<Triple> public_split;

  const SyntheticIdentitySpec& identity(int identity_id) const;
  TokenSequence prompt_tokens() const { return TokenSequence::encode(config.prompt, vocabulary); }
  TokenSequence answer_tokens(const std::string& answer) const { return TokenSequence::encode(answer, vocabulary); }
};

/// Name syllables; every one is a vocabulary word.
const std::vector<std::string>& syllables();

/// Vocabulary shared by every dataset built with `prompt`.
std::shared_ptr<const Vocabulary> toy_vocabulary(const std::string& prompt);

/// Attributes are a pure function of (identity_id, dataset seed).
IdentityAttributes derive_attributes(int identity_id, std::uint64_t seed);

/// Sample images are a pure function of (identity, sample index, seed).
ImageTensor render_sample(const SyntheticIdentitySpec& identity, int sample_index, std::uint64_t seed,
                          ImageShape shape);

Dataset build_dataset(const DatasetConfig& config);

/// One line per triple: image path, prompt, answer, identity id, split tag
/// (tab separated), private split first.
std::string manifest(const Dataset& dataset);

/// Writes manifest.tsv and the PNG images under `dir`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

}  // namespace vlminv::toy
