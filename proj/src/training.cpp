#include "molfuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "molfuse/numerics/ops.hpp"
#include "molfuse/util.hpp"

namespace molfuse::training {

using numerics::Tensor;
using numerics::Var;
namespace ops = numerics;

namespace {

struct BatchInputs {
  encoder::GraphBatch graphs;
  Tensor text;
  Tensor targets;  // B x 1, normalised
};

BatchInputs gather(const Dataset& data, std::span<const std::size_t> idx, bool with_text,
                   qm9::TargetId target, const qm9::TargetScaler& scaler) {
  std::vector<const graph::MoleculeGraph*> graphs;
  graphs.reserve(idx.size());
  std::vector<double> text, ys;
  for (std::size_t i : idx) {
    const Sample& s = data.samples[i];
    graphs.push_back(&s.graph);
    if (with_text) text.insert(text.end(), s.text.begin(), s.text.end());
    ys.push_back(scaler.normalize(s.target(target)));
  }
  BatchInputs b;
  b.graphs = encoder::make_batch(graphs);
  if (with_text) b.text = Tensor({idx.size(), text::kEmbeddingDim}, std::move(text));
  b.targets = Tensor({idx.size(), 1}, std::move(ys));
  return b;
}

}  // namespace

std::string_view modality_name(Modality m) {
  return m == Modality::GeometryOnly ? "geometry_only" : "multimodal";
}

std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "geometry_only") return Modality::GeometryOnly;
  if (s == "multimodal") return Modality::Multimodal;
  return std::nullopt;
}

std::string_view source_name(EmbeddingSource s) {
  return s == EmbeddingSource::File ? "file" : "featurizer";
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be positive");
  if (!qm9::is_benchmark_target(target))
    throw ConfigError("target '" + std::string(qm9::target_name(target)) +
                      "' is not a benchmark target");
  model.encoder.validate();
  model.fusion().validate();
}

Dataset assemble_dataset(std::span<const qm9::Molecule> molecules,
                         const pubchem::MultimodalManifest& manifest,
                         const graph::RbfConfig& rbf, EmbeddingSource source,
                         const text::EmbeddingFile* embeddings) {
  if (source == EmbeddingSource::File && !embeddings)
    throw ConfigError("file embedding source needs an embedding file");
  std::map<std::string, const qm9::Molecule*> by_id;
  for (const auto& m : molecules) by_id[m.id] = &m;
  std::vector<pubchem::TextDescriptors> descs;
  for (const auto& inc : manifest.included) descs.push_back(inc.descriptors);
  const text::NumericStandardizer standardizer = text::fit_standardizer(descs);

  Dataset out;
  out.source = source;
  for (const auto& inc : manifest.included) {
    const auto it = by_id.find(inc.id);
    if (it == by_id.end()) throw ConfigError("manifest names unknown molecule " + inc.id);
    Sample s;
    s.id = inc.id;
    s.graph = graph::build_graph(*it->second, rbf);
    s.targets = it->second->targets;
    if (source == EmbeddingSource::File) {
      const auto rec = embeddings->records.find(inc.descriptors.cid);
      if (rec == embeddings->records.end()) {
        throw ConfigError("embedding file has no vector for cid " +
                          std::to_string(inc.descriptors.cid) + " (" + inc.id + ")");
      }
      s.text = rec->second.vector;
    } else {
      s.text = text::featurize_descriptors(inc.descriptors, standardizer);
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<std::size_t>> split_folds(std::size_t n, std::size_t k,
                                                  std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  if (n < k) {
    throw ConfigError("cannot split " + std::to_string(n) + " samples into " +
                      std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  numerics::Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].push_back(order[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::string fold_hash(const std::vector<std::vector<std::size_t>>& folds) {
  std::string text;
  for (const auto& f : folds) {
    for (std::size_t i : f) text += std::to_string(i) + ",";
    text += ";";
  }
  return util::sha256_hex(text);
}

void adam_step(model::ParamSet& params, std::span<const Tensor> grads, AdamState& state,
               const AdamOptions& opt) {
  const auto& names = params.names();
  if (grads.size() != names.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(names.size()) + " parameters");
  }
  const std::uint64_t step = state.step + 1;
  for (std::size_t p = 0; p < names.size(); ++p) {
    if (grads[p].shape() != params.get(names[p]).shape()) {
      throw DimensionError("adam_step: gradient for '" + names[p] + "' has shape " +
                           numerics::shape_string(grads[p].shape()));
    }
    if (!grads[p].all_finite()) {
      throw NonFiniteError("non-finite gradient at step " + std::to_string(step) +
                           " in parameter '" + names[p] + "'");
    }
  }
  if (state.m.empty()) {
    for (const auto& name : names) {
      state.m.emplace_back(params.get(name).shape(), 0.0);
      state.v.emplace_back(params.get(name).shape(), 0.0);
    }
  }
  state.step = step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t p = 0; p < names.size(); ++p) {
    auto w = params.get(names[p]).data();
    auto m = state.m[p].data();
    auto v = state.v[p].data();
    const auto g = grads[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
}

model::ParamSet init_model(const ModelConfig& cfg, Modality modality, numerics::Rng& rng) {
  const bool multi = modality == Modality::Multimodal;
  model::ParamSet p = encoder::init_encoder(cfg.encoder, rng);
  if (multi) p.merge(text::init_text_head(cfg.text_width, rng));
  p.merge(fusion::init_fusion(cfg.fusion(), rng, multi));
  return p;
}

Var forward(const encoder::GraphBatch& batch, const Tensor& text,
            const model::BoundParams& params, const ModelConfig& cfg, Modality modality,
            Tensor* gates) {
  const Var g = encoder::encode(batch, params, cfg.encoder);
  if (modality == Modality::GeometryOnly) return fusion::geometry_only_head(g, params);
  numerics::Tape& tape = g.tape();
  const Var tp = text::project(tape.constant(text), params);
  const fusion::Fused fz = fusion::fuse(g, tp, params);
  if (gates) *gates = fz.gate.value();
  return fusion::predict(fz.f, params);
}

qm9::TargetScaler training_scaler(const Dataset& data, std::span<const std::size_t> idx,
                                  qm9::TargetId target) {
  std::vector<double> ys;
  ys.reserve(idx.size());
  for (std::size_t i : idx) ys.push_back(data.samples[i].target(target));
  try {
    return qm9::fit_scaler(ys);
  } catch (const DegenerateInputError&) {
    if (ys.empty()) throw ConfigError("training split is empty");
    return {ys.front(), 1.0};
  }
}

FitResult fit(const TrainConfig& cfg, const Dataset& data, std::span<const std::size_t> train_idx,
              const Progress& progress) {
  cfg.validate();
  if (train_idx.empty()) throw ConfigError("training split is empty");
  const bool multi = cfg.modality == Modality::Multimodal;
  numerics::Rng rng(cfg.seed);
  FitResult out;
  out.params = init_model(cfg.model, cfg.modality, rng);
  out.scaler = training_scaler(data, train_idx, cfg.target);
  AdamState adam;
  const AdamOptions opt{cfg.learning_rate};
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const BatchInputs in = gather(data, idx, multi, cfg.target, out.scaler);
      numerics::Tape tape;
      const model::BoundParams bound(tape, out.params, true);
      const Var pred = forward(in.graphs, in.text, bound, cfg.model, cfg.modality);
      const Var loss = ops::mean_abs_error(pred, in.targets);
      loss_sum += loss.value()[0] * static_cast<double>(idx.size());
      tape.backward(loss);
      adam_step(out.params, bound.gradients(), adam, opt);
    }
    out.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    if (progress && (epoch + 1) % 10 == 0) {
      progress("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
               " train MAE (normalised) " + util::format_fixed(out.epoch_loss.back(), 5));
    }
  }
  return out;
}

Predictions predict(const model::ParamSet& params, const TrainConfig& cfg, const Dataset& data,
                    std::span<const std::size_t> idx, const qm9::TargetScaler& scaler) {
  const bool multi = cfg.modality == Modality::Multimodal;
  Predictions out;
  for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
    const auto chunk = idx.subspan(start, end - start);
    const BatchInputs in = gather(data, chunk, multi, cfg.target, scaler);
    numerics::Tape tape;
    const model::BoundParams bound(tape, params, false);
    Tensor gates;
    const Var pred = forward(in.graphs, in.text, bound, cfg.model, cfg.modality,
                             multi ? &gates : nullptr);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      out.values.push_back(scaler.denormalize(pred.value()[r]));
      if (multi) {
        double s = 0.0;
        for (std::size_t c = 0; c < gates.cols(); ++c) s += gates.at(r, c);
        out.gate_mean.push_back(s / static_cast<double>(gates.cols()));
      }
    }
  }
  return out;
}

double mean_abs_error(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw DimensionError("mean_abs_error: sizes " + std::to_string(pred.size()) + " and " +
                         std::to_string(truth.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  const std::vector<std::vector<std::size_t>>& folds, const Progress& progress) {
  cfg.validate();
  if (data.samples.empty()) throw ConfigError("dataset is empty");
  TrainResult out;
  double total = 0.0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (folds[f].empty()) throw ConfigError("fold " + std::to_string(f) + " is empty");
    std::vector<std::size_t> train_idx;
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f) train_idx.insert(train_idx.end(), folds[g].begin(), folds[g].end());
    std::sort(train_idx.begin(), train_idx.end());
    if (progress) progress("fold " + std::to_string(f + 1) + "/" + std::to_string(folds.size()));
    FoldResult r;
    r.fold = f;
    r.held_out = folds[f];
    r.fit = fit(cfg, data, train_idx, progress);
    r.predictions = predict(r.fit.params, cfg, data, r.held_out, r.fit.scaler);
    std::vector<double> truth;
    for (std::size_t i : r.held_out) truth.push_back(data.samples[i].target(cfg.target));
    r.mae = mean_abs_error(r.predictions.values, truth);
    total += r.mae;
    out.folds.push_back(std::move(r));
  }
  out.mean_mae = total / static_cast<double>(folds.size());
  return out;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const Progress& progress) {
  return train(cfg, data, split_folds(data.samples.size(), cfg.folds, cfg.seed), progress);
}

}  // namespace molfuse::training
