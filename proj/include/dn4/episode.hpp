#pragma once

#include <cstdint>
#include <vector>

#include "dn4/dataset.hpp"
#include "dn4/measure.hpp"

namespace dn4 {

struct EpisodeImage {
    std::size_t image;  // index into the ImageStore
    int label;          // episode-local label in [0, way)
};

/// One C-way K-shot task. Support images are label-major: class c owns
/// support[c*shot, (c+1)*shot); queries likewise with queries_per_class.
struct Episode {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::size_t queries_per_class = 0;
    std::vector<std::size_t> classes;  // section class index per episode label
    std::vector<EpisodeImage> support;
    std::vector<EpisodeImage> queries;
    std::uint64_t seed = 0;

    std::vector<int> query_labels() const;
    /// Stable FNV-1a digest of the sampled classes and images.
    std::uint64_t hash() const;
};

/// Classes without replacement, then K + queries_per_class images per class
/// without replacement, split into support and query.
Episode sample_episode(const ClassSection& section, std::size_t way, std::size_t shot, std::size_t queries_per_class,
                       Rng& rng);

/// The `index`-th episode of a stream: a pure function of its arguments.
Episode sample_episode(const ClassSection& section, std::size_t way, std::size_t shot, std::size_t queries_per_class,
                       std::uint64_t seed, Stream stream, std::uint64_t index);

/// Batch order used for an episode: all support images, then all queries.
struct EpisodeBatch {
    Tensor images;  // [way*shot + queries, C, H, W]
    EpisodeLayout layout;
};

struct AugmentConfig {
    bool enabled = false;
    std::size_t crop_padding = 8;
    double flip_probability = 0.5;

    void validate() const;
};

/// Zero-pads by crop_padding, takes a random crop of the original size and
/// flips horizontally with flip_probability. Identity when disabled.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
Tensor flip_horizontal(const Tensor& image);

EpisodeBatch make_episode_batch(const ImageStore& store, const Episode& episode,
                                const AugmentConfig* augment_cfg = nullptr, Rng* rng = nullptr);

}  // namespace dn4
