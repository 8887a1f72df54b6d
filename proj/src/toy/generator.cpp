#include "vlminv/toy/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv::toy {

std::vector<nn::ParamRef> ToyGeneratorWeights::refs() {
  return {{"dec_in", &dec_in},         {"dec_in_bias", &dec_in_bias},         {"dec_out", &dec_out},
          {"dec_out_bias", &dec_out_bias}, {"enc_in", &enc_in},               {"enc_in_bias", &enc_in_bias},
          {"enc_mean", &enc_mean},     {"enc_mean_bias", &enc_mean_bias},     {"enc_logvar", &enc_logvar},
          {"enc_logvar_bias", &enc_logvar_bias}};
}

namespace {

class ToyGeneratorPass final : public GeneratorPass {
 public:
  ToyGeneratorPass(const ToyGeneratorWeights& w, ImageShape shape, const Vector& latent) : w_(w) {
    hidden_ = (w.dec_in * latent + w.dec_in_bias.col(0)).array().tanh().matrix();
    Vector pixels = nn::sigmoid((w.dec_out * hidden_ + w.dec_out_bias.col(0)).array()).matrix();
    image_ = ImageTensor(shape, std::move(pixels));
  }

  Vector pullback(const Vector& pixel_cotangent) const override {
    if (pixel_cotangent.size() != image_.pixels.size()) throw ContractViolation("pixel cotangent has wrong size");
    const auto& x = image_.pixels.array();
    const Vector d_pre = (pixel_cotangent.array() * x * (1.0 - x)).matrix();
    const Vector d_hidden = ((w_.dec_out.transpose() * d_pre).array() * (1.0 - hidden_.array().square())).matrix();
    return w_.dec_in.transpose() * d_hidden;
  }

 private:
  const ToyGeneratorWeights& w_;
  Vector hidden_;
};

}  // namespace

ToyGenerator::ToyGenerator(ToyGeneratorConfig config, ToyGeneratorWeights weights, std::uint64_t seed)
    : config_(config), weights_(std::move(weights)), seed_(seed) {
  if (weights_.dec_in.cols() != config_.latent_dim || weights_.dec_out.rows() != config_.output_shape.numel()) {
    throw ConfigError("generator weights do not match configuration");
  }
  refresh_fingerprint();
}

ToyGenerator ToyGenerator::initialize(const ToyGeneratorConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy_generator.init"));
  const Index d = config.latent_dim, h = config.hidden, he = config.encoder_hidden, p = config.output_shape.numel();
  ToyGeneratorWeights w;
  auto dense = [&](Matrix& m, Index rows, Index cols, Real gain) {
    m.resize(rows, cols);
    nn::init_dense(m, rng, gain);
  };
  dense(w.dec_in, h, d, 1.0);
  w.dec_in_bias = Matrix::Zero(h, 1);
  dense(w.dec_out, p, h, 1.0);
  w.dec_out_bias = Matrix::Zero(p, 1);
  dense(w.enc_in, he, p, 1.0);
  w.enc_in_bias = Matrix::Zero(he, 1);
  dense(w.enc_mean, d, he, 1.0);
  w.enc_mean_bias = Matrix::Zero(d, 1);
  dense(w.enc_logvar, d, he, 0.1);
  w.enc_logvar_bias = Matrix::Zero(d, 1);
  return ToyGenerator(config, std::move(w), seed);
}

std::unique_ptr<GeneratorPass> ToyGenerator::forward(const Vector& latent) const {
  if (latent.size() != config_.latent_dim) throw ContractViolation("latent dimension does not match generator");
  return std::make_unique<ToyGeneratorPass>(weights_, config_.output_shape, latent);
}

Vector ToyGenerator::encode(const ImageTensor& image) const {
  if (!(image.shape == config_.output_shape)) throw ContractViolation("image shape does not match generator");
  const Vector a = (weights_.enc_in * image.pixels + weights_.enc_in_bias.col(0)).array().tanh().matrix();
  return weights_.enc_mean * a + weights_.enc_mean_bias.col(0);
}

void ToyGenerator::refresh_fingerprint() { fingerprint_ = sha256_hex(to_json().dump()); }

nlohmann::json ToyGenerator::to_json() const {
  nlohmann::json weights;
  for (const auto& r : const_cast<ToyGeneratorWeights&>(weights_).refs()) weights[r.name] = matrix_to_json(*r.value);
  return {{"kind", "toy_generator"},
          {"seed", seed_},
          {"config",
           {{"latent_dim", config_.latent_dim},
            {"hidden", config_.hidden},
            {"encoder_hidden", config_.encoder_hidden},
            {"height", config_.output_shape.height},
            {"width", config_.output_shape.width},
            {"channels", config_.output_shape.channels}}},
          {"weights", weights}};
}

ToyGenerator ToyGenerator::from_json(const nlohmann::json& j) {
  if (j.at("kind") != "toy_generator") throw ConfigError("checkpoint is not a toy_generator");
  const auto& c = j.at("config");
  ToyGeneratorConfig config;
  config.latent_dim = c.at("latent_dim").get<int>();
  config.hidden = c.at("hidden").get<int>();
  config.encoder_hidden = c.at("encoder_hidden").get<int>();
  config.output_shape = {c.at("height").get<int>(), c.at("width").get<int>(), c.at("channels").get<int>()};
  ToyGeneratorWeights w;
  for (const auto& r : w.refs()) *r.value = matrix_from_json(j.at("weights").at(r.name));
  return ToyGenerator(config, std::move(w), j.at("seed").get<std::uint64_t>());
}

ToyGenerator train_toy_generator(const std::vector<Triple>& public_split, const ToyGeneratorConfig& config,
                                 const GeneratorTrainOptions& options, TrainLog* log) {
  std::vector<const ImageTensor*> images;
  for (const auto& t : public_split)
    if (t.sample_index < options.holdout_from_sample) images.push_back(&t.image);
  if (images.empty()) throw ConfigError("cannot train the generator on an empty public split");

  ToyGenerator gen = ToyGenerator::initialize(config, options.seed);
  auto& w = gen.mutable_weights();
  ToyGeneratorWeights g;
  nn::zero_like(w.refs(), g.refs());
  nn::Adam adam(w.refs(), {options.learning_rate});
  Rng rng(derive_seed(options.seed, "toy_generator.train"));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const Real inv_var = 1.0 / (options.pixel_sigma * options.pixel_sigma);
  const Index p = config.output_shape.numel();
  TrainLog local;
  TrainLog& out = log ? *log : local;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const Real progress = static_cast<Real>(epoch - 1) / std::max(1, options.epochs);
    adam.set_learning_rate(options.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(progress * M_PI))));
    Real recon_sum = 0, kl_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const Index b = static_cast<Index>(std::min(order.size(), start + options.batch_size) - start);
      Matrix x(p, b);
      for (Index j = 0; j < b; ++j) x.col(j) = images[order[start + static_cast<std::size_t>(j)]]->pixels;
      const Matrix a = ((w.enc_in * x).colwise() + w.enc_in_bias.col(0)).array().tanh().matrix();
      const Matrix mu = (w.enc_mean * a).colwise() + w.enc_mean_bias.col(0);
      const Matrix lv = (w.enc_logvar * a).colwise() + w.enc_logvar_bias.col(0);
      Matrix eps(config.latent_dim, b);
      std::normal_distribution<Real> normal(0.0, 1.0);
      for (Index j = 0; j < b; ++j)
        for (Index i = 0; i < eps.rows(); ++i) eps(i, j) = normal(rng);
      const Matrix sd = (0.5 * lv.array()).exp().matrix();
      const Matrix z = mu + sd.cwiseProduct(eps);
      const Matrix h = ((w.dec_in * z).colwise() + w.dec_in_bias.col(0)).array().tanh().matrix();
      const Matrix xr = nn::sigmoid(((w.dec_out * h).colwise() + w.dec_out_bias.col(0)).array()).matrix();

      recon_sum += (xr - x).cwiseAbs().sum() / static_cast<Real>(p);
      kl_sum += 0.5 * (lv.array().exp() + mu.array().square() - 1.0 - lv.array()).sum();

      const Real inv_b = 1.0 / static_cast<Real>(b);
      const Matrix d_pre = ((xr - x).array() * inv_var * xr.array() * (1.0 - xr.array())).matrix() * inv_b;
      g.dec_out = d_pre * h.transpose();
      g.dec_out_bias = d_pre.rowwise().sum();
      const Matrix dzp = ((w.dec_out.transpose() * d_pre).array() * (1.0 - h.array().square())).matrix();
      g.dec_in = dzp * z.transpose();
      g.dec_in_bias = dzp.rowwise().sum();
      const Matrix dz = w.dec_in.transpose() * dzp;
      const Matrix dmu = dz + mu * inv_b;
      const Matrix dlv = (dz.array() * eps.array() * 0.5 * sd.array() + 0.5 * (lv.array().exp() - 1.0) * inv_b).matrix();
      g.enc_mean = dmu * a.transpose();
      g.enc_mean_bias = dmu.rowwise().sum();
      g.enc_logvar = dlv * a.transpose();
      g.enc_logvar_bias = dlv.rowwise().sum();
      const Matrix dap = ((w.enc_mean.transpose() * dmu + w.enc_logvar.transpose() * dlv).array() *
                          (1.0 - a.array().square())).matrix();
      g.enc_in = dap * x.transpose();
      g.enc_in_bias = dap.rowwise().sum();
      adam.step(g.refs());
    }
    if (epoch == 1 || epoch % 10 == 0 || epoch == options.epochs) {
      std::ostringstream line;
      line << "toy_generator epoch " << epoch << " recon_mae " << recon_sum / static_cast<Real>(order.size())
           << " kl " << kl_sum / static_cast<Real>(order.size());
      out.lines.push_back(line.str());
    }
  }
  gen.refresh_fingerprint();
  std::vector<const ImageTensor*> held_out;
  for (const auto& t : public_split)
    if (t.sample_index >= options.holdout_from_sample) held_out.push_back(&t.image);
  if (!held_out.empty()) {
    out.final_loss = reconstruction_error(gen, held_out);
    std::ostringstream line;
    line << "toy_generator held-out recon_mae " << out.final_loss;
    out.lines.push_back(line.str());
  }
  return gen;
}

Real reconstruction_error(const ToyGenerator& generator, const std::vector<const ImageTensor*>& images) {
  if (images.empty()) return 0;
  Real total = 0;
  for (const auto* img : images) {
    const auto pass = generator.forward(generator.encode(*img));
    total += (pass->image().pixels - img->pixels).cwiseAbs().mean();
  }
  return total / static_cast<Real>(images.size());
}

}  // namespace vlminv::toy
