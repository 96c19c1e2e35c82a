#pragma once

#include <span>
#include <vector>

#include "dn4/embedding.hpp"
#include "dn4/episode.hpp"
#include "dn4/measure.hpp"

namespace dn4 {

/// Naive-Bayes nearest neighbor on frozen local descriptors: the embedding is
/// run in running-stats mode and every query goes through classify().
std::vector<int> nbnn_classify(EmbeddingParams<float>& frozen, const ImageStore& store, const Episode& episode,
                               const MeasureConfig& cfg);

/// Cosine k-NN vote. support [S, D] with labels, queries [Q, D].
/// Neighbors are ordered by similarity (lower support index on equal
/// similarity). The majority label wins; among tied labels the one whose
/// closest neighbor ranks first wins.
std::vector<int> global_knn_classify(const Tensor& support, std::span<const int> support_labels,
                                     const Tensor& queries, std::size_t k);

/// Image-level features from the pretrained head, then global_knn_classify.
std::vector<int> global_knn_episode(EmbeddingParams<float>& frozen, const FcHead<float>& head,
                                    const ImageStore& store, const Episode& episode, std::size_t k);

}  // namespace dn4
