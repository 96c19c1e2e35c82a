#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dn4/embedding.hpp"
#include "dn4/episode.hpp"
#include "dn4/measure.hpp"

namespace dn4 {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> first;
    std::vector<Tensor> second;
    std::size_t step = 0;
};

/// Bias-corrected Adam. Parameters without a gradient buffer count as zero
/// gradient. A non-finite gradient raises NumericError naming the parameter.
void adam_step(std::span<Var<float>> params, AdamState& state, double lr, const AdamConfig& cfg = {});

struct TrainConfig {
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries_per_class = 15;
    std::size_t episodes_total = 30000;
    double learning_rate = 1e-3;
    std::size_t lr_halve_every = 10000;
    AdamConfig adam;
    MeasureConfig measure;
    MeasureVariant variant = MeasureVariant::dn4;
    double score_scale = 1.0;  // multiplies z before the softmax
    std::uint64_t seed = 0;
    AugmentConfig augment;
    std::size_t val_every = 500;  // 0 disables validation
    std::size_t val_episodes = 100;
    std::size_t val_queries_per_class = 15;
    EmbeddingConfig embedding;

    void validate() const;
};

/// learning_rate * 0.5^floor(episode / lr_halve_every)
double lr_at(std::size_t episode_index, const TrainConfig& cfg);

/// Mean softmax cross-entropy of the score vectors z [queries, classes].
template <class T>
Var<T> episode_loss(Tape<T>& tape, const Var<T>& z, std::span<const int> true_labels, T scale = T{1});

struct LogRecord {
    std::size_t episode = 0;  // episodes completed
    double loss = 0.0;        // mean loss since the previous record
    double lr = 0.0;
    std::optional<double> val_acc;

    std::string to_json() const;
};

struct TrainResult {
    EmbeddingParams<float> final_params;
    Checkpoint best;            // best-on-validation (final when validation is off)
    std::size_t best_episode = 0;
    std::optional<double> best_val_acc;
    std::vector<float> losses;  // one per episode
    std::vector<LogRecord> log;
    AdamState adam;
};

struct TrainHooks {
    std::function<void(const LogRecord&)> on_log;
    std::function<void(const Checkpoint&)> on_checkpoint;  // each new best
};

/// Episodic training of the embedding through the chosen measure.
TrainResult train(const TrainConfig& config, const ImageStore& store, const ClassSplit& split,
                  const TrainHooks& hooks = {});

/// Validation / test accuracy of a measure-based model on one section.
double episode_accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Predictions for one episode under a descriptor measure (batch = episode).
std::vector<int> predict_episode(EmbeddingParams<float>& params, const ImageStore& store, const Episode& episode,
                                 const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode);

/// Raw score matrix [queries, classes] for one episode.
Tensor score_episode(EmbeddingParams<float>& params, const ImageStore& store, const Episode& episode,
                     const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode);

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    AdamConfig adam;
    HeadConfig head;  // num_classes is filled from the train section
    std::uint64_t seed = 0;
    EmbeddingConfig embedding;
};

struct PretrainResult {
    EmbeddingParams<float> params;
    FcHead<float> head;
    std::vector<float> losses;
    double train_accuracy = 0.0;
    Checkpoint checkpoint;
};

/// Minibatch softmax classification over all train-section classes with the
/// embedding followed by three fully connected layers.
PretrainResult pretrain_classifier(const PretrainConfig& config, const ImageStore& store, const ClassSplit& split);

/// Logits [N, classes] of the pretrained network in running-stats mode.
Tensor classifier_logits(EmbeddingParams<float>& params, const FcHead<float>& head, const Tensor& images);

}  // namespace dn4
