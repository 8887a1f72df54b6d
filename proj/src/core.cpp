#include "vlminv/core.hpp"

#include <sstream>

namespace vlminv {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  id_to_text_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  id_to_text_.insert(id_to_text_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < id_to_text_.size(); ++i) {
    const auto& w = id_to_text_[i];
    if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
      throw ContractViolation("vocabulary entry must be a non-empty word: '" + w + "'");
    }
    if (!text_to_id_.emplace(w, static_cast<TokenId>(i)).second) {
      throw ContractViolation("duplicate vocabulary entry: " + w);
    }
  }
}

const std::string& Vocabulary::text(TokenId id) const {
  if (id < 0 || id >= size()) throw ContractViolation("token id out of range: " + std::to_string(id));
  return id_to_text_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  auto it = text_to_id_.find(std::string(word));
  if (it == text_to_id_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) ids.push_back(find(word).value_or(kUnk));
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    if (!out.empty()) out += ' ';
    out += text(id);
  }
  return out;
}

TokenSequence::TokenSequence(std::vector<TokenId> ids, std::shared_ptr<const Vocabulary> vocab)
    : ids_(std::move(ids)), vocab_(std::move(vocab)) {
  if (!vocab_) throw ContractViolation("token sequence without vocabulary");
  for (TokenId id : ids_) {
    if (id < 0 || id >= vocab_->size()) {
      throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab_->size()));
    }
  }
}

TokenSequence TokenSequence::encode(std::string_view text, std::shared_ptr<const Vocabulary> vocab) {
  auto ids = vocab->encode(text);
  return TokenSequence(std::move(ids), std::move(vocab));
}

ImageTensor::ImageTensor(ImageShape s, Vector p) : shape(s), pixels(std::move(p)) {
  if (s.height <= 0 || s.width <= 0 || s.channels <= 0) throw ContractViolation("image dimensions must be positive");
  if (pixels.size() != s.numel()) throw ContractViolation("pixel buffer does not match image shape");
}

std::vector<TokenId> TargetModel::greedy_decode(const TokenSequence& prompt, const ImageTensor& image,
                                                Index max_len) const {
  std::vector<TokenId> out;
  while (static_cast<Index>(out.size()) < max_len) {
    auto pass = forward(prompt, image, out);
    const auto next = static_cast<TokenId>(argmax(pass->steps().back().logits));
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
  }
  return out;
}

void check_image(const TargetModel& model, const ImageTensor& image) {
  if (!(image.shape == model.input_shape()) || image.pixels.size() != image.shape.numel()) {
    const auto s = model.input_shape();
    throw ContractViolation("image shape mismatch: model expects " + std::to_string(s.height) + "x" +
                            std::to_string(s.width) + "x" + std::to_string(s.channels));
  }
}

ModelStep target_step(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                      const TokenSequence& prefix) {
  check_image(model, image);
  auto pass = model.forward(prompt, image, prefix.span());
  return pass->steps().back();
}

TokenSequence generate_text(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                            Index max_len) {
  if (max_len < 1) throw ContractViolation("max_len must be at least 1");
  check_image(model, image);
  return TokenSequence(model.greedy_decode(prompt, image, max_len), model.vocabulary());
}

ImageTensor decode_latent(const Generator& generator, const LatentVector& latent) {
  if (latent.dim() != generator.latent_dim()) {
    throw ContractViolation("latent dimension " + std::to_string(latent.dim()) + " does not match generator (" +
                            std::to_string(generator.latent_dim()) + ")");
  }
  return generator.forward(latent.values)->image();
}

}  // namespace vlminv
