#include "dn4/gradient_suite.hpp"

#include <cmath>

#include "dn4/embedding.hpp"
#include "dn4/gradcheck.hpp"
#include "dn4/measure.hpp"
#include "dn4/ops.hpp"
#include "dn4/rng.hpp"

namespace dn4 {
namespace {

TensorD uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Reduces an op output to a scalar with fixed random weights, so every
// output entry contributes a distinct gradient.
Var<double> weighted(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(tape, ops::mul(tape, y, Var<double>::constant(uniform(y.shape(), rng, 0.5, 1.5))));
}

// Resamples until every query row has a gap > 1e-3 between its k-th and
// (k+1)-th largest cosine, so finite differences do not cross a selection change.
std::pair<TensorD, TensorD> separated_instance(Rng& rng, std::size_t d, std::size_t m, std::size_t p, std::size_t k) {
    for (;;) {
        auto q = uniform(Shape{d, m}, rng);
        auto pool = uniform(Shape{d, p}, rng);
        const auto sim = cosine_matrix(q, pool, 1e-8);
        bool ok = true;
        std::vector<std::uint32_t> sel(k + 1);
        for (std::size_t i = 0; i < m && ok; ++i) {
            std::span<const double> row(sim.data().data() + i * p, p);
            top_k(row, 0, p, k + 1, sel.data());
            ok = row[sel[k - 1]] - row[sel[k]] > 1e-3;
        }
        if (ok) return {q, pool};
    }
}

}  // namespace

std::vector<OpGradResult> run_gradient_suite(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OpGradResult> out;
    auto x4 = uniform(Shape{2, 3, 6, 6}, rng);

    out.push_back({"conv2d", grad_check([](Tape<double>& t, auto v) { return weighted(t, ops::conv2d(t, v[0], v[1], v[2]), 1); },
                                        {x4, uniform(Shape{4, 3, 3, 3}, rng), uniform(Shape{4}, rng)})});

    out.push_back({"batchnorm2d", grad_check([](Tape<double>& t, auto v) {
                                                 return weighted(t, ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {}), 2);
                                             },
                                             {x4, uniform(Shape{3}, rng, 0.5, 1.5), uniform(Shape{3}, rng)})});

    auto off = uniform(Shape{4, 6}, rng, 1e-2, 1.0);
    for (std::size_t i = 0; i < off.size(); i += 2) off[i] = -off[i];
    out.push_back({"leaky_relu",
                   grad_check([](Tape<double>& t, auto v) { return weighted(t, ops::leaky_relu(t, v[0], 0.2), 3); }, {off})});

    // A shuffled arithmetic progression has no ties anywhere.
    TensorD distinct(Shape{2, 2, 6, 6});
    std::vector<std::size_t> perm(distinct.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    for (std::size_t i = 0; i < perm.size(); ++i) distinct[i] = 0.01 * double(perm[i]) - 0.7;
    out.push_back({"maxpool2d",
                   grad_check([](Tape<double>& t, auto v) { return weighted(t, ops::maxpool2d(t, v[0]), 4); }, {distinct})});

    out.push_back({"fully_connected",
                   grad_check([](Tape<double>& t, auto v) { return weighted(t, ops::fully_connected(t, v[0], v[1], v[2]), 5); },
                              {uniform(Shape{4, 7}, rng), uniform(Shape{5, 7}, rng), uniform(Shape{5}, rng)})});

    const std::vector<int> labels{0, 4, 2, 1};
    out.push_back({"softmax_cross_entropy",
                   grad_check([&labels](Tape<double>& t, auto v) { return ops::cross_entropy(t, v[0], labels); },
                              {uniform(Shape{4, 5}, rng, -3.0, 3.0)})});

    out.push_back({"cosine_matrix",
                   grad_check([](Tape<double>& t, auto v) { return weighted(t, cosine_matrix(t, v[0], v[1], 1e-8), 6); },
                              {uniform(Shape{8, 5}, rng), uniform(Shape{8, 9}, rng)})});

    for (std::size_t k : {1u, 3u}) {
        auto [q, pool] = separated_instance(rng, 8, 6, 20, k);
        MeasureConfig mc;
        mc.k_neighbors = k;
        out.push_back({"image_to_class(k=" + std::to_string(k) + ")",
                       grad_check([mc](Tape<double>& t, auto v) { return image_to_class(t, v[0], v[1], mc); }, {q, pool})});
    }

    // The whole embedding plus DN4 episode scores and the loss.
    EmbeddingConfig cfg;
    cfg.filters_per_layer = 3;
    cfg.input_channels = 3;
    cfg.height = cfg.width = 8;
    auto params = init_params<double>(cfg, rng);
    auto images = uniform(Shape{4, 3, 8, 8}, rng, 0.0, 1.0);
    EpisodeLayout layout{{{0}, {1}}, {2, 3}};
    const std::vector<int> qlabels{0, 1};
    MeasureConfig mc;
    mc.k_neighbors = 1;
    // Conv biases stay constant here: batch-stats normalization cancels them,
    // so their exact gradient is zero and the relative error would only
    // measure finite-difference noise. The conv2d probe covers the bias path.
    std::vector<TensorD> inputs;
    for (const auto& b : params.blocks) {
        inputs.push_back(b.conv_weight.value());
        inputs.push_back(b.bn_gamma.value());
        inputs.push_back(b.bn_beta.value());
    }
    auto composite = grad_check_detailed(
                                             [&](Tape<double>& t, std::span<const Var<double>> v) {
                                                 EmbeddingParams<double> local = params;
                                                 for (std::size_t b = 0; b < 4; ++b) {
                                                     local.blocks[b].conv_weight = v[3 * b];
                                                     local.blocks[b].bn_gamma = v[3 * b + 1];
                                                     local.blocks[b].bn_beta = v[3 * b + 2];
                                                 }
                                                 auto f = embed_features(t, local, Var<double>::constant(images), {});
                                                 auto z = episode_scores(t, f, layout, mc, MeasureVariant::dn4);
                                                 return ops::cross_entropy(t, z, qlabels);
                                             },
                                             inputs);
    out.push_back({"embedding+dn4+loss", composite.max_rel_error});
    return out;
}

}  // namespace dn4
