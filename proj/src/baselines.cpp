#include "dn4/baselines.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <string>

namespace dn4 {

std::vector<int> nbnn_classify(EmbeddingParams<float>& frozen, const ImageStore& store, const Episode& episode,
                               const MeasureConfig& cfg) {
    auto batch = make_episode_batch(store, episode);
    const auto sets = embed(frozen, batch.images, BatchNormMode::running_stats);
    std::vector<ClassPool> pools;
    pools.reserve(episode.way);
    for (std::size_t c = 0; c < episode.way; ++c) {
        std::vector<DescriptorSet> support;
        for (auto i : batch.layout.support[c]) support.push_back(sets[i]);
        pools.push_back(make_pool<float>(static_cast<int>(c), support));
    }
    std::vector<int> out;
    out.reserve(batch.layout.queries.size());
    for (auto qi : batch.layout.queries) {
        auto sv = classify<float>(sets[qi], pools, cfg, MeasureVariant::dn4);
        out.push_back(static_cast<int>(sv.prediction()));
    }
    return out;
}

std::vector<int> global_knn_classify(const Tensor& support, std::span<const int> support_labels,
                                     const Tensor& queries, std::size_t k) {
    require_rank(support.shape(), 2, "knn support features");
    require_rank(queries.shape(), 2, "knn query features");
    const std::size_t s = support.dim(0), d = support.dim(1), q = queries.dim(0);
    if (queries.dim(1) != d) {
        throw DimensionError("knn: support dim " + std::to_string(d) + " vs query dim " +
                             std::to_string(queries.dim(1)));
    }
    if (support_labels.size() != s) throw DimensionError("knn: one label per support feature required");
    if (k < 1 || k > s) {
        throw ConfigError("knn: k=" + std::to_string(k) + " with " + std::to_string(s) + " support images");
    }

    auto norms = [d](const Tensor& x, std::size_t rows) {
        std::vector<double> n(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += double(x[r * d + j]) * x[r * d + j];
            n[r] = std::max(std::sqrt(acc), 1e-8);
        }
        return n;
    };
    const auto sn = norms(support, s);
    const auto qn = norms(queries, q);

    std::vector<int> out(q);
    std::vector<double> sim(s);
    std::vector<std::size_t> order(s);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t t = 0; t < s; ++t) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += double(queries[i * d + j]) * support[t * d + j];
            sim[t] = dot / (qn[i] * sn[t]);
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });

        std::map<int, std::size_t> votes;
        std::map<int, std::size_t> first_rank;
        for (std::size_t r = 0; r < k; ++r) {
            const int label = support_labels[order[r]];
            ++votes[label];
            first_rank.try_emplace(label, r);
        }
        int best = votes.begin()->first;
        for (const auto& [label, n] : votes) {
            const std::size_t bn = votes[best];
            if (n > bn || (n == bn && first_rank[label] < first_rank[best])) best = label;
        }
        out[i] = best;
    }
    return out;
}

std::vector<int> global_knn_episode(EmbeddingParams<float>& frozen, const FcHead<float>& head,
                                    const ImageStore& store, const Episode& episode, std::size_t k) {
    auto batch = make_episode_batch(store, episode);
    const Tensor feats = embed_global(frozen, &head, batch.images, BatchNormMode::running_stats);
    const std::size_t d = feats.dim(1);
    const std::size_t ns = episode.support.size(), nq = episode.queries.size();
    std::vector<float> sbuf(feats.data().begin(), feats.data().begin() + static_cast<std::ptrdiff_t>(ns * d));
    std::vector<float> qbuf(feats.data().begin() + static_cast<std::ptrdiff_t>(ns * d), feats.data().end());
    std::vector<int> labels;
    for (const auto& s : episode.support) labels.push_back(s.label);
    return global_knn_classify(Tensor(Shape{ns, d}, std::move(sbuf)), labels, Tensor(Shape{nq, d}, std::move(qbuf)),
                               k);
}

}  // namespace dn4
