#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molfuse/encoder.hpp"
#include "molfuse/fusion.hpp"
#include "molfuse/pubchem.hpp"
#include "molfuse/qm9.hpp"
#include "molfuse/text.hpp"

namespace molfuse::training {

enum class Modality { GeometryOnly, Multimodal };
std::string_view modality_name(Modality m);
std::optional<Modality> parse_modality(std::string_view s);

enum class EmbeddingSource { File, Featurizer };
std::string_view source_name(EmbeddingSource s);

struct ModelConfig {
  encoder::EncoderConfig encoder;
  std::size_t text_width = 16;

  fusion::FusionConfig fusion() const { return {encoder.hidden, text_width}; }
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;        // initialisation and batch order
  std::size_t folds = 3;
  qm9::TargetId target = qm9::TargetId::homo;
  Modality modality = Modality::GeometryOnly;
  ModelConfig model;

  void validate() const;
};

// A molecule ready for the model: graph, 768-wide text vector, targets.
struct Sample {
  std::string id;
  graph::MoleculeGraph graph;
  std::vector<double> text;
  std::array<double, qm9::kNumTargets> targets{};

  double target(qm9::TargetId t) const { return targets[static_cast<std::size_t>(t)]; }
};

struct Dataset {
  std::vector<Sample> samples;
  EmbeddingSource source = EmbeddingSource::Featurizer;
};

// Joins molecules with their manifest entries; only included molecules are
// kept, in manifest order. File mode takes vectors from `embeddings` and
// throws ConfigError naming the first cid without one; featurizer mode
// standardises numeric descriptors over the included set.
Dataset assemble_dataset(std::span<const qm9::Molecule> molecules,
                         const pubchem::MultimodalManifest& manifest,
                         const graph::RbfConfig& rbf, EmbeddingSource source,
                         const text::EmbeddingFile* embeddings = nullptr);

// Disjoint folds covering 0..n-1 after a seeded shuffle; sizes differ by at
// most one, larger folds first.
std::vector<std::vector<std::size_t>> split_folds(std::size_t n, std::size_t k,
                                                  std::uint64_t seed);
// sha256 over the fold index lists.
std::string fold_hash(const std::vector<std::vector<std::size_t>>& folds);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<numerics::Tensor> m;
  std::vector<numerics::Tensor> v;
  std::uint64_t step = 0;
};

// Gradients in params.names() order. A non-finite gradient throws
// NonFiniteError naming the step and the parameter; params are untouched.
void adam_step(model::ParamSet& params, std::span<const numerics::Tensor> grads,
               AdamState& state, const AdamOptions& opt = {});

model::ParamSet init_model(const ModelConfig& cfg, Modality modality, numerics::Rng& rng);

// Normalised predictions, B x 1. `text` is B x 768 and ignored for the
// geometry-only model. When `gates` is given it receives the B x n gate.
numerics::Var forward(const encoder::GraphBatch& batch, const numerics::Tensor& text,
                      const model::BoundParams& params, const ModelConfig& cfg,
                      Modality modality, numerics::Tensor* gates = nullptr);

// Mean/std of the training split; a constant target gets scale 1 so the
// model simply learns the mean.
qm9::TargetScaler training_scaler(const Dataset& data, std::span<const std::size_t> idx,
                                  qm9::TargetId target);

struct FitResult {
  model::ParamSet params;
  qm9::TargetScaler scaler;
  std::vector<double> epoch_loss;  // mean normalised training MAE per epoch
};

using Progress = std::function<void(const std::string&)>;

FitResult fit(const TrainConfig& cfg, const Dataset& data, std::span<const std::size_t> train_idx,
              const Progress& progress = {});

struct Predictions {
  std::vector<double> values;     // native units
  std::vector<double> gate_mean;  // per molecule, multimodal only
};

Predictions predict(const model::ParamSet& params, const TrainConfig& cfg, const Dataset& data,
                    std::span<const std::size_t> idx, const qm9::TargetScaler& scaler);

double mean_abs_error(std::span<const double> pred, std::span<const double> truth);

struct FoldResult {
  std::size_t fold = 0;
  double mae = 0.0;  // native units, held-out fold
  std::vector<std::size_t> held_out;
  Predictions predictions;
  FitResult fit;
};

struct TrainResult {
  std::vector<FoldResult> folds;
  double mean_mae = 0.0;
};

TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  const std::vector<std::vector<std::size_t>>& folds,
                  const Progress& progress = {});

// Folds from split_folds(n, cfg.folds, cfg.seed).
TrainResult train(const TrainConfig& cfg, const Dataset& data, const Progress& progress = {});

}  // namespace molfuse::training
