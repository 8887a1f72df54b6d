#include "vlminv/toy/vlm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv::toy {

constexpr Real kNormEps = 1e-12;

struct ToyVlm::Activations {
  Matrix patches;               // patch_dim x Np, centred
  std::vector<TokenId> tokens;  // ids at positions Np .. L-1
  Index out_begin = 0;          // position of <bos>
  Matrix x0;                    // D x L input embeddings
  Matrix k, v;                  // D x L
  Matrix q;                     // D x O
  Matrix attn;                  // O x L, causal rows
  Matrix mixed;                 // D x O
  Matrix h1;                    // D x O
  Matrix u;                     // H x O
  Matrix h2;                    // D x O, residual stream output
  Vector norm;                  // O, column norms of h2
  Matrix feat;                  // D x O, h2 / |h2|: penultimate features

  Index outputs() const { return q.cols(); }
  Index length() const { return x0.cols(); }
};

std::vector<nn::ParamRef> ToyVlmWeights::refs() {
  return {{"token_embedding", &token_embedding}, {"position", &position},  {"patch_proj", &patch_proj},
          {"patch_bias", &patch_bias},           {"wq", &wq},              {"wk", &wk},
          {"wv", &wv},                           {"wo", &wo},              {"mlp_in", &mlp_in},
          {"mlp_in_bias", &mlp_in_bias},         {"mlp_out", &mlp_out},    {"mlp_out_bias", &mlp_out_bias},
          {"head", &head},                       {"head_bias", &head_bias}};
}

Index ToyVlmWeights::parameter_count() {
  Index n = 0;
  for (const auto& r : refs()) n += r.value->size();
  return n;
}

class ToyVlmPass final : public ModelPass {
 public:
  ToyVlmPass(const ToyVlm& model, std::shared_ptr<ToyVlm::Activations> act) : model_(model), act_(std::move(act)) {
    const auto& w = model_.weights_;
    const Matrix logits = ((model_.config_.logit_scale * w.head) * act_->feat).colwise() + w.head_bias.col(0);
    steps_.reserve(static_cast<std::size_t>(act_->outputs()));
    for (Index r = 0; r < act_->outputs(); ++r) steps_.push_back({logits.col(r), act_->feat.col(r)});
  }

  Vector pullback(std::span<const StepCotangent> cotangents) const override {
    if (static_cast<Index>(cotangents.size()) > act_->outputs()) {
      throw ContractViolation("more cotangents than model steps");
    }
    const auto& w = model_.weights_;
    Matrix d_out = Matrix::Zero(model_.config_.model_dim, act_->outputs());
    for (std::size_t r = 0; r < cotangents.size(); ++r) {
      const auto& c = cotangents[r];
      if (c.logits.size() > 0)
        d_out.col(static_cast<Index>(r)).noalias() += model_.config_.logit_scale * (w.head.transpose() * c.logits);
      if (c.penultimate.size() > 0) d_out.col(static_cast<Index>(r)) += c.penultimate;
    }
    Vector d_pixels;
    model_.backward(*act_, d_out, nullptr, &d_pixels);
    return d_pixels;
  }

 private:
  const ToyVlm& model_;
  std::shared_ptr<ToyVlm::Activations> act_;
};

ToyVlm::ToyVlm(ToyVlmConfig config, std::shared_ptr<const Vocabulary> vocab, ToyVlmWeights weights,
               std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)), weights_(std::move(weights)), seed_(seed) {
  const auto& s = config_.image_shape;
  if (s.height % config_.patch != 0 || s.width % config_.patch != 0) {
    throw ConfigError("image size must be a multiple of the patch size");
  }
  const int per_row = s.width / config_.patch;
  const int pd = config_.patch_dim();
  patch_source_.resize(static_cast<std::size_t>(s.numel()));
  for (int p = 0; p < config_.num_patches(); ++p) {
    const int py = p / per_row, px = p % per_row;
    for (int dy = 0; dy < config_.patch; ++dy)
      for (int dx = 0; dx < config_.patch; ++dx)
        for (int c = 0; c < s.channels; ++c) {
          const int within = (dy * config_.patch + dx) * s.channels + c;
          const Index pixel = (static_cast<Index>(py * config_.patch + dy) * s.width + px * config_.patch + dx) *
                                  s.channels + c;
          patch_source_[static_cast<std::size_t>(p) * pd + within] = pixel;
        }
  }
  refresh_fingerprint();
}

ToyVlm ToyVlm::initialize(const ToyVlmConfig& config, std::shared_ptr<const Vocabulary> vocab, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy_vlm.init"));
  const Index d = config.model_dim, h = config.mlp_dim, v = vocab->size();
  ToyVlmWeights w;
  auto normal = [&](Index r, Index c, Real scale) {
    Matrix m(r, c);
    std::normal_distribution<Real> n(0.0, scale);
    for (Index j = 0; j < c; ++j)
      for (Index i = 0; i < r; ++i) m(i, j) = n(rng);
    return m;
  };
  w.token_embedding = normal(d, v, 0.5);
  w.position = normal(d, config.max_length(), 0.1);
  w.patch_proj.resize(d, config.patch_dim());
  nn::init_dense(w.patch_proj, rng);
  w.patch_bias = Matrix::Zero(d, 1);
  for (Matrix* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    m->resize(d, d);
    nn::init_dense(*m, rng);
  }
  w.mlp_in.resize(h, d);
  nn::init_dense(w.mlp_in, rng);
  w.mlp_in_bias = Matrix::Zero(h, 1);
  w.mlp_out.resize(d, h);
  nn::init_dense(w.mlp_out, rng, 0.5);
  w.mlp_out_bias = Matrix::Zero(d, 1);
  w.head.resize(v, d);
  nn::init_dense(w.head, rng);
  w.head_bias = Matrix::Zero(v, 1);
  return ToyVlm(config, std::move(vocab), std::move(w), seed);
}

void ToyVlm::refresh_fingerprint() { fingerprint_ = sha256_hex(to_json().dump()); }

Matrix ToyVlm::patches_of(const ImageTensor& image) const {
  check_image(*this, image);
  Matrix patches(config_.patch_dim(), config_.num_patches());
  Real* dst = patches.data();
  for (std::size_t k = 0; k < patch_source_.size(); ++k) dst[k] = image.pixels[patch_source_[k]] - 0.5;
  return patches;
}

Matrix ToyVlm::embed_patches(const Matrix& patches) const {
  return (weights_.patch_proj * patches).colwise() + weights_.patch_bias.col(0);
}

std::shared_ptr<ToyVlm::Activations> ToyVlm::run(const Matrix& patch_embed, const Matrix& patches,
                                                 const TokenSequence& prompt,
                                                 std::span<const TokenId> context) const {
  if (prompt.size() > config_.max_prompt) throw ContractViolation("prompt longer than model maximum");
  if (static_cast<Index>(context.size()) > config_.max_context) {
    throw ContractViolation("answer context longer than model maximum");
  }
  const auto& w = weights_;
  auto act = std::make_shared<Activations>();
  act->patches = patches;
  act->tokens = prompt.ids();
  act->tokens.push_back(Vocabulary::kBos);
  for (TokenId id : context) {
    if (id < 0 || id >= vocab_->size()) throw ContractViolation("context token outside vocabulary");
    act->tokens.push_back(id);
  }
  const Index np = config_.num_patches();
  const Index len = np + static_cast<Index>(act->tokens.size());
  const Index outs = static_cast<Index>(context.size()) + 1;
  act->out_begin = np + prompt.size();

  act->x0.resize(config_.model_dim, len);
  act->x0.leftCols(np) = patch_embed;
  for (std::size_t j = 0; j < act->tokens.size(); ++j)
    act->x0.col(np + static_cast<Index>(j)) = w.token_embedding.col(act->tokens[j]);
  act->x0 += w.position.leftCols(len);

  act->k.noalias() = w.wk * act->x0;
  act->v.noalias() = w.wv * act->x0;
  const auto x_out = act->x0.middleCols(act->out_begin, outs);
  act->q.noalias() = w.wq * x_out;

  const Real scale = 1.0 / std::sqrt(static_cast<Real>(config_.model_dim));
  act->attn.noalias() = scale * act->q.transpose() * act->k;
  for (Index r = 0; r < outs; ++r) {
    const Index visible = act->out_begin + r + 1;
    auto row = act->attn.row(r);
    const Real mx = row.head(visible).maxCoeff();
    row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
    row.head(visible) /= row.head(visible).sum();
    row.tail(len - visible).setZero();
  }
  act->mixed.noalias() = act->v * act->attn.transpose();
  act->h1 = x_out;
  act->h1.noalias() += w.wo * act->mixed;
  act->u = ((w.mlp_in * act->h1).colwise() + w.mlp_in_bias.col(0)).array().tanh().matrix();
  act->h2 = act->h1;
  act->h2.noalias() += w.mlp_out * act->u;
  act->h2.colwise() += w.mlp_out_bias.col(0);
  act->norm = (act->h2.colwise().squaredNorm().array() + kNormEps).sqrt().transpose();
  act->feat = act->h2 * act->norm.cwiseInverse().asDiagonal();
  return act;
}

void ToyVlm::backward(const Activations& act, const Matrix& d_out, ToyVlmWeights* grads, Vector* d_pixels) const {
  const auto& w = weights_;
  const Index np = config_.num_patches();
  const Index outs = act.outputs();
  const Index len = act.length();
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(config_.model_dim));
  const auto x_out = act.x0.middleCols(act.out_begin, outs);

  // d_out is taken w.r.t. the normalised features
  const Vector proj = (act.feat.array() * d_out.array()).colwise().sum().transpose();
  const Matrix dh2 = (d_out - act.feat * proj.asDiagonal()) * act.norm.cwiseInverse().asDiagonal();
  if (grads) {
    grads->mlp_out.noalias() += dh2 * act.u.transpose();
    grads->mlp_out_bias += dh2.rowwise().sum();
  }
  const Matrix dz = ((w.mlp_out.transpose() * dh2).array() * (1.0 - act.u.array().square())).matrix();
  if (grads) {
    grads->mlp_in.noalias() += dz * act.h1.transpose();
    grads->mlp_in_bias += dz.rowwise().sum();
  }
  Matrix dh1 = dh2;
  dh1.noalias() += w.mlp_in.transpose() * dz;
  if (grads) grads->wo.noalias() += dh1 * act.mixed.transpose();
  const Matrix dmixed = w.wo.transpose() * dh1;

  Matrix dx0 = Matrix::Zero(config_.model_dim, len);
  dx0.middleCols(act.out_begin, outs) += dh1;

  const Matrix dv = dmixed * act.attn;
  const Matrix dattn = dmixed.transpose() * act.v;
  const Vector row_dot = (act.attn.array() * dattn.array()).rowwise().sum();
  const Matrix ds = (act.attn.array() * (dattn.colwise() - row_dot).array()).matrix();
  const Matrix dq = scale * act.k * ds.transpose();
  const Matrix dk = scale * act.q * ds;

  if (grads) {
    grads->wq.noalias() += dq * x_out.transpose();
    grads->wk.noalias() += dk * act.x0.transpose();
    grads->wv.noalias() += dv * act.x0.transpose();
  }
  dx0.middleCols(act.out_begin, outs).noalias() += w.wq.transpose() * dq;
  dx0.noalias() += w.wk.transpose() * dk;
  dx0.noalias() += w.wv.transpose() * dv;

  if (grads) {
    grads->position.leftCols(len) += dx0;
    for (std::size_t j = 0; j < act.tokens.size(); ++j)
      grads->token_embedding.col(act.tokens[j]) += dx0.col(np + static_cast<Index>(j));
    grads->patch_proj.noalias() += dx0.leftCols(np) * act.patches.transpose();
    grads->patch_bias += dx0.leftCols(np).rowwise().sum();
  }
  if (d_pixels) {
    const Matrix dpatch = w.patch_proj.transpose() * dx0.leftCols(np);
    d_pixels->setZero(config_.image_shape.numel());
    const Real* src = dpatch.data();
    for (std::size_t k = 0; k < patch_source_.size(); ++k) (*d_pixels)[patch_source_[k]] += src[k];
  }
}

std::unique_ptr<ModelPass> ToyVlm::forward(const TokenSequence& prompt, const ImageTensor& image,
                                           std::span<const TokenId> context) const {
  const Matrix patches = patches_of(image);
  return std::make_unique<ToyVlmPass>(*this, run(embed_patches(patches), patches, prompt, context));
}

std::vector<TokenId> ToyVlm::greedy_decode(const TokenSequence& prompt, const ImageTensor& image,
                                           Index max_len) const {
  // Same arithmetic as forward(); the patch embedding is just computed once.
  const Matrix patches = patches_of(image);
  const Matrix embed = embed_patches(patches);
  std::vector<TokenId> out;
  const Index limit = std::min<Index>(max_len, config_.max_context + 1);
  while (static_cast<Index>(out.size()) < limit) {
    const auto act = run(embed, patches, prompt, out);
    const Vector logits =
        config_.logit_scale * (weights_.head * act->feat.col(act->outputs() - 1)) + weights_.head_bias.col(0);
    const auto next = static_cast<TokenId>(argmax(logits));
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
  }
  return out;
}

ToyVlm::SampleStats ToyVlm::accumulate(const TokenSequence& prompt, const ImageTensor& image,
                                       const TokenSequence& answer, ToyVlmWeights* grads) const {
  const Matrix patches = patches_of(image);
  const auto act = run(embed_patches(patches), patches, prompt, answer.span());
  const Index outs = act->outputs();
  Matrix logits = ((config_.logit_scale * weights_.head) * act->feat).colwise() + weights_.head_bias.col(0);
  SampleStats stats;
  Matrix dlogits(logits.rows(), outs);
  for (Index r = 0; r < outs; ++r) {
    const TokenId target = r < answer.size() ? answer[r] : Vocabulary::kEos;
    const Real mx = logits.col(r).maxCoeff();
    const Vector e = (logits.col(r).array() - mx).exp().matrix();
    const Real z = e.sum();
    stats.loss += std::log(z) - (logits(target, r) - mx);
    stats.correct += argmax(logits.col(r)) == target ? 1 : 0;
    ++stats.positions;
    dlogits.col(r) = e / z;
    dlogits(target, r) -= 1.0;
  }
  if (grads) {
    grads->head.noalias() += config_.logit_scale * (dlogits * act->feat.transpose());
    grads->head_bias += dlogits.rowwise().sum();
    const Matrix d_out = config_.logit_scale * (weights_.head.transpose() * dlogits);
    backward(*act, d_out, grads, nullptr);
  }
  return stats;
}

nlohmann::json ToyVlm::to_json() const {
  nlohmann::json weights;
  for (const auto& r : const_cast<ToyVlmWeights&>(weights_).refs()) weights[r.name] = matrix_to_json(*r.value);
  std::vector<std::string> words(vocab_->words().begin() + 4, vocab_->words().end());
  return {{"kind", "toy_vlm"},
          {"seed", seed_},
          {"config",
           {{"height", config_.image_shape.height},
            {"width", config_.image_shape.width},
            {"channels", config_.image_shape.channels},
            {"patch", config_.patch},
            {"model_dim", config_.model_dim},
            {"mlp_dim", config_.mlp_dim},
            {"max_prompt", config_.max_prompt},
            {"max_context", config_.max_context},
            {"logit_scale", config_.logit_scale}}},
          {"vocabulary", words},
          {"weights", weights}};
}

ToyVlm ToyVlm::from_json(const nlohmann::json& j) {
  if (j.at("kind") != "toy_vlm") throw ConfigError("checkpoint is not a toy_vlm");
  const auto& c = j.at("config");
  ToyVlmConfig config;
  config.image_shape = {c.at("height").get<int>(), c.at("width").get<int>(), c.at("channels").get<int>()};
  config.patch = c.at("patch").get<int>();
  config.model_dim = c.at("model_dim").get<int>();
  config.mlp_dim = c.at("mlp_dim").get<int>();
  config.max_prompt = c.at("max_prompt").get<int>();
  config.max_context = c.at("max_context").get<int>();
  config.logit_scale = c.at("logit_scale").get<double>();
  auto vocab = std::make_shared<const Vocabulary>(j.at("vocabulary").get<std::vector<std::string>>());
  ToyVlmWeights w;
  for (const auto& r : w.refs()) *r.value = matrix_from_json(j.at("weights").at(r.name));
  return ToyVlm(config, std::move(vocab), std::move(w), j.at("seed").get<std::uint64_t>());
}

Real teacher_forced_accuracy(const ToyVlm& model, const std::vector<Triple>& split, const Dataset& dataset) {
  const auto prompt = dataset.prompt_tokens();
  long correct = 0, total = 0;
  for (const auto& t : split) {
    const auto s = model.accumulate(prompt, t.image, dataset.answer_tokens(t.answer), nullptr);
    correct += s.correct;
    total += s.positions;
  }
  return total == 0 ? 0.0 : static_cast<Real>(correct) / static_cast<Real>(total);
}

ToyVlm train_toy_vlm(const std::vector<Triple>& split, const Dataset& dataset, const ToyVlmConfig& config,
                     const VlmTrainOptions& options, TrainLog* log) {
  if (split.empty()) throw ConfigError("cannot train the target model on an empty split");
  ToyVlm model = ToyVlm::initialize(config, dataset.vocabulary, options.seed);
  auto& weights = model.mutable_weights();
  ToyVlmWeights grads;
  nn::zero_like(weights.refs(), grads.refs());
  nn::Adam adam(weights.refs(), {options.learning_rate});
  const auto prompt = dataset.prompt_tokens();
  std::vector<TokenSequence> answers;
  for (const auto& t : split) answers.push_back(dataset.answer_tokens(t.answer));

  Rng rng(derive_seed(options.seed, "toy_vlm.shuffle"));
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  std::normal_distribution<Real> noise(0.0, options.pixel_noise > 0 ? options.pixel_noise : 1.0);
  TrainLog local;
  TrainLog& out = log ? *log : local;
  const int batch = std::max(1, options.batch_size);
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    // Cosine decay to 5% of the base rate.
    const Real progress = static_cast<Real>(epoch - 1) / std::max(1, options.epochs);
    adam.set_learning_rate(options.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(progress * M_PI))));
    Real epoch_loss = 0;
    long correct = 0, positions = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch));
      for (const auto& r : grads.refs()) r.value->setZero();
      for (std::size_t b = start; b < stop; ++b) {
        ImageTensor image = split[order[b]].image;
        if (options.pixel_noise > 0) {
          for (Index k = 0; k < image.pixels.size(); ++k)
            image.pixels[k] = std::clamp(image.pixels[k] + noise(rng), 0.0, 1.0);
        }
        const auto s = model.accumulate(prompt, image, answers[order[b]], &grads);
        epoch_loss += s.loss;
        correct += s.correct;
        positions += s.positions;
      }
      const Real inv = 1.0 / static_cast<Real>(stop - start);
      for (const auto& r : grads.refs()) *r.value *= inv;
      adam.step(grads.refs());
    }
    out.final_loss = epoch_loss / static_cast<Real>(positions);
    if (epoch == 1 || epoch % 10 == 0 || epoch == options.epochs) {
      std::ostringstream line;
      line << "toy_vlm epoch " << epoch << " loss " << out.final_loss << " running_acc "
           << static_cast<Real>(correct) / static_cast<Real>(positions);
      out.lines.push_back(line.str());
    }
  }
  model.refresh_fingerprint();
  out.accuracy = teacher_forced_accuracy(model, split, dataset);
  out.reached_threshold = out.accuracy >= options.accuracy_threshold;
  std::ostringstream summary;
  summary << "toy_vlm teacher-forced accuracy " << out.accuracy;
  out.lines.push_back(summary.str());
  if (!out.reached_threshold) {
    std::ostringstream warn;
    warn << "WARNING: toy_vlm UNDER-TRAINED: accuracy " << out.accuracy << " below threshold "
         << options.accuracy_threshold << " after " << options.epochs << " epochs";
    out.lines.push_back(warn.str());
  }
  return model;
}

}  // namespace vlminv::toy
