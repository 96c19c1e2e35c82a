#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dn4/embedding.hpp"

namespace dn4 {

enum class Similarity { cosine };

/// Which measure turns descriptors into class scores.
///   dn4  - image-to-class: per query descriptor, top-k over the pooled class descriptors
///   ioi1 - cosine of the concatenated descriptor vectors, max over support images
///   ioi2 - top-k restricted to each support image, summed over the support images
enum class MeasureVariant { dn4, ioi1, ioi2 };

const char* variant_name(MeasureVariant v);
MeasureVariant parse_variant(const std::string& name);

struct MeasureConfig {
    std::size_t k_neighbors = 3;
    Similarity similarity = Similarity::cosine;
    double zero_norm_eps = 1e-8;
};

/// All descriptors of one class's support images, flattened into one d x p
/// matrix. `ranges[i]` are the columns contributed by support image i.
template <class T>
struct BasicClassPool {
    int class_id = 0;
    BasicTensor<T> descriptors;  // [d, p]
    std::vector<std::pair<std::size_t, std::size_t>> ranges;

    std::size_t dim() const { return descriptors.dim(0); }
    std::size_t columns() const { return descriptors.dim(1); }
};

using ClassPool = BasicClassPool<float>;

template <class T>
BasicClassPool<T> make_pool(int class_id, std::span<const BasicDescriptorSet<T>> support);

template <class T>
struct BasicSimilarityVector {
    std::vector<T> scores;

    std::size_t size() const { return scores.size(); }
    /// argmax, lowest index on ties
    std::size_t prediction() const;
};

using SimilarityVector = BasicSimilarityVector<float>;

/// Entry (i, j) = q_i . p_j / (max(|q_i|, eps) * max(|p_j|, eps)); queries [d,m], pool [d,p] -> [m,p].
template <class T>
BasicTensor<T> cosine_matrix(const BasicTensor<T>& queries, const BasicTensor<T>& pool, double eps);

/// Differentiable form of cosine_matrix.
template <class T>
Var<T> cosine_matrix(Tape<T>& tape, const Var<T>& queries, const Var<T>& pool, double eps);

/// Differentiable image-to-class score of queries [d,m] against a pool
/// [d,p]. The top-k selection is fixed in the forward pass.
template <class T>
Var<T> image_to_class(Tape<T>& tape, const Var<T>& queries, const Var<T>& pool, const MeasureConfig& cfg);

/// Indices of the k largest entries of `row` restricted to [begin, end), in
/// descending value order; ties go to the lower index.
template <class T>
void top_k(std::span<const T> row, std::size_t begin, std::size_t end, std::size_t k, std::uint32_t* out);

template <class T>
T image_to_class(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, const MeasureConfig& cfg);

template <class T>
T ioi1_score(const BasicDescriptorSet<T>& query, const BasicDescriptorSet<T>& support, double eps = 1e-8);

/// DN4-IoI-1 class score: best concatenated-vector cosine over the pool's support images.
template <class T>
T ioi1_class_score(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, double eps = 1e-8);

template <class T>
T ioi2_score(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, const MeasureConfig& cfg);

template <class T>
BasicSimilarityVector<T> classify(const BasicDescriptorSet<T>& query, std::span<const BasicClassPool<T>> pools,
                                  const MeasureConfig& cfg, MeasureVariant variant = MeasureVariant::dn4);

/// Support/query layout of one episode inside a batched feature map.
struct EpisodeLayout {
    std::vector<std::vector<std::size_t>> support;  // per class, image indices into the batch
    std::vector<std::size_t> queries;                // image indices into the batch
};

/// Differentiable episode scoring. features [N, d, h, w] -> scores [queries, classes].
/// Top-k selections are treated as constants in the backward pass.
template <class T>
Var<T> episode_scores(Tape<T>& tape, const Var<T>& features, const EpisodeLayout& layout,
                      const MeasureConfig& cfg, MeasureVariant variant);

}  // namespace dn4
