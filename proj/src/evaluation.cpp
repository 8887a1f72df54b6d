#include "vlminv/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/nn.hpp"
#include "vlminv/rng.hpp"

namespace vlminv {

EvalClassifier::EvalClassifier(ImageShape shape, std::vector<int> labels, Matrix w1, Matrix b1, Matrix w2, Matrix b2)
    : shape_(shape), labels_(std::move(labels)), w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)),
      b2_(std::move(b2)) {
  if (w1_.cols() != shape_.numel() || w2_.rows() != static_cast<Index>(labels_.size())) {
    throw ConfigError("classifier weights do not match its shape or label set");
  }
}

std::vector<nn::ParamRef> EvalClassifier::refs() { return {{"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_}, {"b2", &b2_}}; }

Vector EvalClassifier::features(const ImageTensor& image) const {
  if (!(image.shape == shape_)) throw ContractViolation("classifier input has the wrong shape");
  return (w1_ * image.pixels + b1_.col(0)).array().tanh().matrix();
}

Vector EvalClassifier::logits(const ImageTensor& image) const { return w2_ * features(image) + b2_.col(0); }

std::vector<int> EvalClassifier::ranked_labels(const ImageTensor& image) const {
  const Vector s = logits(image);
  std::vector<Index> order(static_cast<std::size_t>(s.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return s[a] > s[b]; });
  std::vector<int> out;
  for (Index k : order) out.push_back(labels_[static_cast<std::size_t>(k)]);
  return out;
}

bool EvalClassifier::knows(int identity_id) const {
  return std::find(labels_.begin(), labels_.end(), identity_id) != labels_.end();
}

std::string EvalClassifier::fingerprint() const { return sha256_hex(to_json().dump()); }

nlohmann::json EvalClassifier::to_json() const {
  return {{"kind", "eval_classifier"},
          {"height", shape_.height},
          {"width", shape_.width},
          {"channels", shape_.channels},
          {"labels", labels_},
          {"weights",
           {{"w1", matrix_to_json(w1_)},
            {"b1", matrix_to_json(b1_)},
            {"w2", matrix_to_json(w2_)},
            {"b2", matrix_to_json(b2_)}}}};
}

EvalClassifier EvalClassifier::from_json(const nlohmann::json& j) {
  if (j.at("kind") != "eval_classifier") throw ConfigError("checkpoint is not an eval_classifier");
  const auto& w = j.at("weights");
  return EvalClassifier({j.at("height").get<int>(), j.at("width").get<int>(), j.at("channels").get<int>()},
                        j.at("labels").get<std::vector<int>>(), matrix_from_json(w.at("w1")),
                        matrix_from_json(w.at("b1")), matrix_from_json(w.at("w2")), matrix_from_json(w.at("b2")));
}

namespace {

// Separable box blur with edge clamping.
Vector box_blur(const Vector& pixels, const ImageShape& shape, int radius) {
  Vector tmp(pixels.size()), out(pixels.size());
  const auto idx = [&](int y, int x, int c) { return (static_cast<Index>(y) * shape.width + x) * shape.channels + c; };
  const Real norm = 1.0 / (2 * radius + 1);
  for (int y = 0; y < shape.height; ++y)
    for (int x = 0; x < shape.width; ++x)
      for (int c = 0; c < shape.channels; ++c) {
        Real acc = 0;
        for (int d = -radius; d <= radius; ++d) acc += pixels[idx(y, std::clamp(x + d, 0, shape.width - 1), c)];
        tmp[idx(y, x, c)] = acc * norm;
      }
  for (int y = 0; y < shape.height; ++y)
    for (int x = 0; x < shape.width; ++x)
      for (int c = 0; c < shape.channels; ++c) {
        Real acc = 0;
        for (int d = -radius; d <= radius; ++d) acc += tmp[idx(std::clamp(y + d, 0, shape.height - 1), x, c)];
        out[idx(y, x, c)] = acc * norm;
      }
  return out;
}

}  // namespace

EvalClassifier train_eval_classifier(const std::vector<toy::Triple>& private_split,
                                     const ClassifierTrainOptions& options, toy::TrainLog* log) {
  if (private_split.empty()) throw ConfigError("cannot train the evaluation classifier on an empty split");
  std::set<int> label_set;
  for (const auto& t : private_split) label_set.insert(t.identity_id);
  const std::vector<int> labels(label_set.begin(), label_set.end());
  const ImageShape shape = private_split.front().image.shape;
  const Index p = shape.numel(), h = options.hidden, c = static_cast<Index>(labels.size());

  Rng rng(derive_seed(options.seed, "eval_classifier"));
  Matrix w1(h, p), w2(c, h);
  nn::init_dense(w1, rng);
  nn::init_dense(w2, rng);
  EvalClassifier clf(shape, labels, w1, Matrix::Zero(h, 1), w2, Matrix::Zero(c, 1));
  auto params = clf.refs();
  std::array<Matrix, 4> grad_store;
  std::vector<nn::ParamRef> grads;
  for (std::size_t i = 0; i < params.size(); ++i) grads.push_back({params[i].name, &grad_store[i]});
  nn::zero_like(params, grads);
  nn::Adam adam(params, {options.learning_rate});

  std::vector<std::size_t> order(private_split.size());
  std::iota(order.begin(), order.end(), 0);
  std::normal_distribution<Real> noise(0.0, options.pixel_noise > 0 ? options.pixel_noise : 1.0);
  std::uniform_real_distribution<Real> coin(0.0, 1.0);
  std::uniform_int_distribution<int> radius(0, 1);
  toy::TrainLog local;
  toy::TrainLog& out = log ? *log : local;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Real epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const Index b = static_cast<Index>(std::min(order.size(), start + options.batch_size) - start);
      Matrix x(p, b);
      Matrix target = Matrix::Zero(c, b);
      for (Index j = 0; j < b; ++j) {
        const auto& t = private_split[order[start + static_cast<std::size_t>(j)]];
        x.col(j) = t.image.pixels;
        if (coin(rng) < options.blur_probability) x.col(j) = box_blur(t.image.pixels, shape, 1 + radius(rng));
        if (options.pixel_noise > 0)
          for (Index k = 0; k < p; ++k) x(k, j) += noise(rng);
        const auto cls = std::find(labels.begin(), labels.end(), t.identity_id) - labels.begin();
        target(cls, j) = 1.0;
      }
      const Matrix& W1 = *params[0].value;
      const Matrix& B1 = *params[1].value;
      const Matrix& W2 = *params[2].value;
      const Matrix& B2 = *params[3].value;
      const Matrix a = ((W1 * x).colwise() + B1.col(0)).array().tanh().matrix();
      Matrix z = (W2 * a).colwise() + B2.col(0);
      for (Index j = 0; j < b; ++j) {
        const Real mx = z.col(j).maxCoeff();
        z.col(j) = (z.col(j).array() - mx).exp().matrix();
        z.col(j) /= z.col(j).sum();
        epoch_loss -= std::log(std::max(1e-300, (z.col(j).transpose() * target.col(j))(0)));
      }
      const Matrix dz = (z - target) / static_cast<Real>(b);
      grad_store[2] = dz * a.transpose();
      grad_store[3] = dz.rowwise().sum();
      const Matrix da = ((W2.transpose() * dz).array() * (1.0 - a.array().square())).matrix();
      grad_store[0] = da * x.transpose();
      grad_store[1] = da.rowwise().sum();
      adam.step(grads);
    }
    if (epoch == 1 || epoch % 10 == 0 || epoch == options.epochs) {
      std::ostringstream line;
      line << "eval_classifier epoch " << epoch << " loss " << epoch_loss / static_cast<Real>(order.size());
      out.lines.push_back(line.str());
    }
  }
  out.accuracy = classifier_accuracy(clf, private_split);
  out.reached_threshold = out.accuracy >= 0.95;
  std::ostringstream summary;
  summary << "eval_classifier train accuracy " << out.accuracy;
  out.lines.push_back(summary.str());
  if (!out.reached_threshold) out.lines.push_back("WARNING: eval_classifier below the 0.95 accuracy gate");
  return clf;
}

Real classifier_accuracy(const EvalClassifier& classifier, const std::vector<toy::Triple>& split) {
  if (split.empty()) return 0;
  long correct = 0;
  for (const auto& t : split) correct += classifier.ranked_labels(t.image).front() == t.identity_id ? 1 : 0;
  return static_cast<Real>(correct) / static_cast<Real>(split.size());
}

bool answer_matches(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                    const std::string& answer, Index max_len, bool normalize) {
  const auto decoded = generate_text(model, prompt, image, max_len);
  return contains_answer(decoded.text(), answer, normalize);
}

Real match_rate(const TargetModel& model, const std::vector<InversionResult>& results, const TokenSequence& prompt,
                const std::vector<std::string>& answers, Index max_len, bool normalize) {
  if (results.size() != answers.size()) throw ContractViolation("one answer per result required");
  if (results.empty()) return 0;
  long hits = 0;
  for (std::size_t j = 0; j < results.size(); ++j)
    hits += answer_matches(model, prompt, results[j].image, answers[j], max_len, normalize) ? 1 : 0;
  return static_cast<Real>(hits) / static_cast<Real>(results.size());
}

AttackAccuracy attack_accuracy(const EvalClassifier& classifier, const std::vector<const ImageTensor*>& images,
                               const std::vector<int>& labels) {
  if (images.size() != labels.size()) throw ContractViolation("one label per image required");
  AttackAccuracy acc;
  long top1 = 0, top5 = 0;
  for (std::size_t j = 0; j < images.size(); ++j) {
    if (!classifier.knows(labels[j])) {
      ++acc.excluded;
      continue;
    }
    const auto ranked = classifier.ranked_labels(*images[j]);
    const auto pos = std::find(ranked.begin(), ranked.end(), labels[j]) - ranked.begin();
    top1 += pos < 1 ? 1 : 0;
    top5 += pos < 5 ? 1 : 0;
    ++acc.evaluated;
  }
  if (acc.evaluated > 0) {
    acc.top1 = static_cast<Real>(top1) / acc.evaluated;
    acc.top5 = static_cast<Real>(top5) / acc.evaluated;
  }
  return acc;
}

Real feature_distance(const FeatureExtractor& extractor, const ImageTensor& reconstruction,
                      const std::vector<const ImageTensor*>& privates) {
  if (privates.empty()) throw ConfigError("no private images for this label");
  const Vector f = extractor(reconstruction);
  Real total = 0;
  for (const auto* img : privates) total += (f - extractor(*img)).norm();
  return total / static_cast<Real>(privates.size());
}

namespace {

nlohmann::json optional_json(const std::optional<Real>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json CellMetrics::to_json() const {
  nlohmann::json j{{"config_hash", config_hash}, {"strategy", strategy}, {"loss", loss}, {"missing", missing}};
  if (missing) {
    for (const char* k : {"match_rate", "top1", "top5", "delta_eval"}) j[k] = nullptr;
  } else {
    j["match_rate"] = match_rate;
    j["top1"] = top1;
    j["top5"] = top5;
    j["delta_eval"] = delta_eval;
  }
  j["delta_face"] = optional_json(delta_face);
  j["n_targets"] = n_targets;
  j["n_reconstructions"] = n_reconstructions;
  j["excluded"] = excluded;
  j["attacc_m"] = optional_json(attacc_m);
  j["attacc_h"] = optional_json(attacc_h);
  return j;
}

CellMetrics aggregate_cell(const std::string& strategy, const std::string& loss, const std::string& config_hash,
                           const std::vector<TargetVerdict>& verdicts) {
  CellMetrics c;
  c.strategy = strategy;
  c.loss = loss;
  c.config_hash = config_hash;
  std::set<std::pair<int, std::uint64_t>> runs;
  long matches = 0, top1 = 0, top5 = 0, ranked = 0, dist_n = 0, face_n = 0;
  Real dist = 0, face = 0;
  for (const auto& v : verdicts) {
    if (v.strategy != strategy || v.loss != loss) continue;
    runs.insert({v.target, v.seed});
    ++c.n_reconstructions;
    matches += v.match ? 1 : 0;
    if (!v.rank) {
      ++c.excluded;
    } else {
      ++ranked;
      top1 += *v.rank <= 1 ? 1 : 0;
      top5 += *v.rank <= 5 ? 1 : 0;
    }
    if (v.delta_eval) {
      dist += *v.delta_eval;
      ++dist_n;
    }
    if (v.delta_face) {
      face += *v.delta_face;
      ++face_n;
    }
  }
  c.n_targets = static_cast<int>(runs.size());
  c.missing = c.n_reconstructions == 0;
  if (c.n_reconstructions > 0) c.match_rate = static_cast<Real>(matches) / c.n_reconstructions;
  if (ranked > 0) {
    c.top1 = static_cast<Real>(top1) / static_cast<Real>(ranked);
    c.top5 = static_cast<Real>(top5) / static_cast<Real>(ranked);
  }
  if (dist_n > 0) c.delta_eval = dist / static_cast<Real>(dist_n);
  if (face_n > 0) c.delta_face = face / static_cast<Real>(face_n);
  return c;
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) cells_json.push_back(c.to_json());
  return {{"cells", cells_json},
          {"n_cells", cells.size()},
          {"n_verdicts", verdicts.size()},
          {"missing_runs", missing_runs}};
}

std::string per_target_csv(const std::vector<TargetVerdict>& verdicts) {
  std::ostringstream out;
  out << "strategy,loss,target,seed,candidate,match,rank,delta_eval,delta_face,error\n";
  for (const auto& v : verdicts) {
    out << v.strategy << ',' << v.loss << ',' << v.target << ',' << v.seed << ',' << v.candidate_id << ','
        << (v.match ? 1 : 0) << ',' << (v.rank ? std::to_string(*v.rank) : "") << ','
        << (v.delta_eval ? format_real(*v.delta_eval) : "") << ',' << (v.delta_face ? format_real(*v.delta_face) : "")
        << ',' << v.error << '\n';
  }
  return out.str();
}

std::string summary_table(const EvaluationReport& report) {
  std::ostringstream out;
  out << "| strategy | loss | match_rate | top1 | top5 | delta_eval | n_targets |\n";
  out << "|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& c : report.cells) {
    if (c.missing) {
      out << "| " << c.strategy << " | " << c.loss << " | missing | missing | missing | missing | 0 |\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "| %s | %s | %.4f | %.4f | %.4f | %.4f | %d |\n", c.strategy.c_str(),
                  c.loss.c_str(), c.match_rate, c.top1, c.top5, c.delta_eval, c.n_targets);
    out << buf;
  }
  return out.str();
}

namespace {

constexpr std::array<std::array<unsigned char, 3>, 4> kStrategyColours{{
    {230, 126, 34},  // tmi
    {192, 57, 43},   // tmi-c
    {41, 128, 185},  // smi
    {39, 174, 96},   // smi-aw
}};

std::array<unsigned char, 3> colour_for(const std::string& strategy) {
  for (std::size_t i = 0; i < 4; ++i)
    if (to_string(kAllStrategies[i]) == strategy) return kStrategyColours[i];
  return {120, 120, 120};
}

void axes(Raster& r, int margin) {
  r.line(margin, margin / 2, margin, r.height - margin, 0, 0, 0);
  r.line(margin, r.height - margin, r.width - margin / 2, r.height - margin, 0, 0, 0);
  for (int q = 1; q <= 4; ++q) {
    const int y = r.height - margin - q * (r.height - margin - margin / 2) / 4;
    for (int x = margin; x < r.width - margin / 2; x += 4) r.set(x, y, 200, 200, 200);
  }
}

// Bars grouped by loss, coloured by strategy; y spans [0, 1].
Raster match_rate_chart(const EvaluationReport& report) {
  const int bar = 14, gap = 4, group_gap = 18, margin = 24, plot_h = 200;
  const int width = margin * 2 + static_cast<int>(report.cells.size()) * (bar + gap) + 3 * group_gap;
  Raster r(std::max(width, 120), plot_h + 2 * margin);
  axes(r, margin);
  int x = margin + gap;
  std::string last_loss;
  for (const auto& c : report.cells) {
    if (!last_loss.empty() && c.loss != last_loss) x += group_gap;
    last_loss = c.loss;
    const auto col = colour_for(c.strategy);
    if (c.missing) {
      // hatched outline marks a missing cell
      for (int y = r.height - margin - 20; y < r.height - margin; y += 3) r.line(x, y, x + bar, y, 150, 150, 150);
    } else {
      const int top = r.height - margin - static_cast<int>(std::lround(c.match_rate * plot_h * 0.95));
      r.fill_rect(x, top, x + bar, r.height - margin, col[0], col[1], col[2]);
    }
    x += bar + gap;
  }
  return r;
}

Raster loss_chart(const std::vector<const LossCurve*>& curves) {
  const int margin = 24, w = 360, h = 240;
  Raster r(w, h);
  axes(r, margin);
  Real lo = std::numeric_limits<Real>::infinity(), hi = -lo;
  std::size_t steps = 1;
  for (const auto* c : curves) {
    for (Real v : c->mean_aggregate) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    steps = std::max(steps, c->mean_aggregate.size());
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const auto px = [&](std::size_t i) {
    return margin + static_cast<int>((w - 1.5 * margin) * static_cast<Real>(i) / std::max<std::size_t>(1, steps - 1));
  };
  const auto py = [&](Real v) { return h - margin - static_cast<int>((h - 1.5 * margin) * (v - lo) / (hi - lo)); };
  for (const auto* c : curves) {
    const auto col = colour_for(c->strategy);
    for (std::size_t i = 1; i < c->mean_aggregate.size(); ++i) {
      r.line(px(i - 1), py(c->mean_aggregate[i - 1]), px(i), py(c->mean_aggregate[i]), col[0], col[1], col[2]);
    }
  }
  return r;
}

}  // namespace

void build_report(const EvaluationReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "metrics.json", report.to_json().dump(2) + "\n");
  write_file_atomic(dir / "per_target.csv", per_target_csv(report.verdicts));
  write_file_atomic(dir / "summary.md", summary_table(report));
  write_png(dir / "match_rate.png", match_rate_chart(report));
  std::map<std::string, std::vector<const LossCurve*>> by_loss;
  for (const auto& c : report.curves) by_loss[c.loss].push_back(&c);
  for (const auto& [loss, curves] : by_loss) write_png(dir / ("loss_curves_" + loss + ".png"), loss_chart(curves));
}

}  // namespace vlminv
