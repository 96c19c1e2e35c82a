#pragma once

#include <array>
#include <optional>
#include <vector>

#include "dn4/ops.hpp"
#include "dn4/rng.hpp"
#include "dn4/serialize.hpp"

namespace dn4 {

/// Four-block convolutional embedding: [conv-BN-leaky-pool] x2, [conv-BN-leaky] x2.
struct EmbeddingConfig {
    std::size_t filters_per_layer = 64;
    std::size_t input_channels = 3;
    std::size_t height = 84;
    std::size_t width = 84;
    double leaky_slope = 0.2;
    BatchNormMode batchnorm_mode = BatchNormMode::batch_stats;
    double bn_eps = 1e-5;

    void validate() const;
};

struct DescriptorCount {
    std::size_t h, w, m, d;
    friend bool operator==(const DescriptorCount&, const DescriptorCount&) = default;
};

DescriptorCount descriptor_count(const EmbeddingConfig& config);

/// The d x m local descriptors of one image. Column j is spatial location
/// (j / w, j % w) of the final feature map.
template <class T>
struct BasicDescriptorSet {
    BasicTensor<T> descriptors;  // [d, m]
    std::size_t h = 0;
    std::size_t w = 0;

    BasicDescriptorSet() = default;
    BasicDescriptorSet(BasicTensor<T> desc, std::size_t hh, std::size_t ww);

    std::size_t dim() const { return descriptors.dim(0); }
    std::size_t count() const { return descriptors.dim(1); }
    T operator()(std::size_t row, std::size_t col) const { return descriptors[row * count() + col]; }
};

using DescriptorSet = BasicDescriptorSet<float>;

template <class T>
struct ConvBlock {
    Var<T> conv_weight;  // [out, in, 3, 3]
    Var<T> conv_bias;    // [out]
    Var<T> bn_gamma;     // [out]
    Var<T> bn_beta;      // [out]
    RunningStats<T> running;
};

template <class T>
struct EmbeddingParams {
    EmbeddingConfig config;
    std::array<ConvBlock<T>, 4> blocks;

    std::vector<Var<T>> parameters() const;
    EmbeddingParams clone() const;
};

/// Conv weights ~ N(0, sqrt(2 / fan_in)), biases 0, gamma 1, beta 0.
template <class T>
EmbeddingParams<T> init_params(const EmbeddingConfig& config, Rng& rng);

struct ForwardOptions {
    BatchNormMode mode = BatchNormMode::batch_stats;
    bool update_running = false;
};

/// images [N, C, H, W] -> final feature map [N, d, H/4, W/4].
template <class T>
Var<T> embed_features(Tape<T>& tape, EmbeddingParams<T>& params, const Var<T>& images,
                      const ForwardOptions& options);

/// Splits a [N, d, h, w] feature map into N descriptor sets.
template <class T>
std::vector<BasicDescriptorSet<T>> to_descriptor_sets(const BasicTensor<T>& features);

/// Gradient-free embedding in the config's batch-norm mode.
std::vector<DescriptorSet> embed(EmbeddingParams<float>& params, const Tensor& images);
std::vector<DescriptorSet> embed(EmbeddingParams<float>& params, const Tensor& images, BatchNormMode mode);

// ---- fully connected head for the image-level baseline ----

struct HeadConfig {
    std::size_t hidden1 = 512;
    std::size_t hidden2 = 256;
    std::size_t num_classes = 0;
};

template <class T>
struct Linear {
    Var<T> weight;  // [out, in]
    Var<T> bias;    // [out]
};

template <class T>
struct FcHead {
    HeadConfig config;
    std::size_t in_features = 0;
    std::array<Linear<T>, 3> layers;

    std::vector<Var<T>> parameters() const;
};

template <class T>
FcHead<T> init_head(const HeadConfig& config, std::size_t in_features, Rng& rng);

template <class T>
struct HeadOutput {
    Var<T> features;  // after the second FC layer's activation
    Var<T> logits;
};

/// features_map [N, d, h, w] is flattened and run through three FC layers.
template <class T>
HeadOutput<T> head_forward(Tape<T>& tape, const FcHead<T>& head, const Var<T>& feature_map, T slope);

/// Image-level features used by the global k-NN baseline, [N, hidden2].
Tensor embed_global(EmbeddingParams<float>& params, const FcHead<float>* head, const Tensor& images,
                    BatchNormMode mode);

// ---- checkpoints ----

Checkpoint to_checkpoint(const EmbeddingParams<float>& params, const FcHead<float>* head = nullptr);
EmbeddingParams<float> params_from_checkpoint(const Checkpoint& ckpt, const EmbeddingConfig& config);
/// Empty when the checkpoint carries no fc tensors.
std::optional<FcHead<float>> head_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dn4
