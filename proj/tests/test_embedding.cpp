#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dn4/embedding.hpp"
#include "test_util.hpp"

using namespace dn4;
using dn4::testing::random_tensor;

namespace {

EmbeddingConfig small_config(std::size_t filters = 8, std::size_t size = 16) {
    EmbeddingConfig c;
    c.filters_per_layer = filters;
    c.height = c.width = size;
    return c;
}

template <class T>
bool same_values(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return a.shape() == b.shape() && a.storage() == b.storage();
}

}  // namespace

TEST_CASE("descriptor_count follows the two 2x2 pools") {
    EmbeddingConfig c;
    CHECK(descriptor_count(c) == DescriptorCount{21, 21, 441, 64});

    c.filters_per_layer = 1;
    c.height = c.width = 4;
    CHECK(descriptor_count(c) == DescriptorCount{1, 1, 1, 1});

    c.filters_per_layer = 32;
    c.height = c.width = 32;
    CHECK(descriptor_count(c) == DescriptorCount{8, 8, 64, 32});
}

TEST_CASE("config validation") {
    EmbeddingConfig c;
    c.height = 30;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.filters_per_layer = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.leaky_slope = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(EmbeddingConfig{}.validate());
}

TEST_CASE("init_params: determinism and stated initialization") {
    const auto cfg = small_config();
    Rng a(9), b(9);
    const auto p = init_params<float>(cfg, a);
    const auto q = init_params<float>(cfg, b);
    const auto pv = p.parameters(), qv = q.parameters();
    REQUIRE(pv.size() == 16);
    for (std::size_t i = 0; i < pv.size(); ++i) CHECK(same_values(pv[i].value(), qv[i].value()));

    for (const auto& blk : p.blocks) {
        for (float g : blk.bn_gamma.value().data()) CHECK(g == 1.0f);
        for (float v : blk.bn_beta.value().data()) CHECK(v == 0.0f);
        for (float v : blk.conv_bias.value().data()) CHECK(v == 0.0f);
    }
    CHECK(p.blocks[0].conv_weight.shape() == Shape{8, 3, 3, 3});
    CHECK(p.blocks[1].conv_weight.shape() == Shape{8, 8, 3, 3});
}

TEST_CASE("init weight std matches sqrt(2 / fan_in) within 10%") {
    EmbeddingConfig cfg;  // 64 filters
    Rng rng(3);
    const auto p = init_params<double>(cfg, rng);
    const auto& w = p.blocks[1].conv_weight.value();
    REQUIRE(w.shape() == Shape{64, 64, 3, 3});
    double mu = 0, ss = 0;
    for (double v : w.data()) mu += v;
    mu /= double(w.size());
    for (double v : w.data()) ss += (v - mu) * (v - mu);
    const double sd = std::sqrt(ss / double(w.size() - 1));
    CHECK(std::abs(sd / std::sqrt(2.0 / 576.0) - 1.0) < 0.1);
}

TEST_CASE("embed: 32x32 input with 32 filters gives 64 descriptors of dimension 32") {
    auto cfg = small_config(32, 32);
    Rng rng(1);
    auto p = init_params<float>(cfg, rng);
    const auto sets = embed(p, random_tensor<float>(Shape{3, 3, 32, 32}, rng, 0, 1));
    REQUIRE(sets.size() == 3);
    for (const auto& s : sets) {
        CHECK(s.dim() == 32);
        CHECK(s.count() == 64);
        CHECK(s.h == 8);
        CHECK(s.w == 8);
    }
}

TEST_CASE("embed rejects a mismatched image size") {
    auto cfg = small_config();
    Rng rng(1);
    auto p = init_params<float>(cfg, rng);
    CHECK_THROWS_AS(embed(p, Tensor(Shape{1, 3, 20, 20})), DimensionError);
}

TEST_CASE("identical images in one batch get identical descriptors") {
    auto cfg = small_config();
    Rng rng(2);
    auto p = init_params<float>(cfg, rng);
    auto x = random_tensor<float>(Shape{4, 3, 16, 16}, rng, 0, 1);
    const std::size_t img = 3 * 16 * 16;
    std::copy_n(x.data().begin(), img, x.data().begin() + 2 * img);  // image 2 = image 0
    for (auto mode : {BatchNormMode::batch_stats, BatchNormMode::running_stats}) {
        const auto sets = embed(p, x, mode);
        CHECK(same_values(sets[0].descriptors, sets[2].descriptors));
        CHECK_FALSE(same_values(sets[0].descriptors, sets[1].descriptors));
    }
}

TEST_CASE("descriptor column j is spatial location (j / w, j % w)") {
    Rng rng(4);
    const auto fmap = random_tensor<double>(Shape{2, 5, 3, 4}, rng);
    const auto sets = to_descriptor_sets(fmap);
    REQUIRE(sets.size() == 2);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 5; ++c)
            for (std::size_t j = 0; j < 12; ++j)
                CHECK(sets[n](c, j) == fmap[((n * 5 + c) * 3 + j / 4) * 4 + j % 4]);
}

TEST_CASE("a descriptor only sees its receptive field") {
    // Changing a corner pixel must leave far-away locations untouched in
    // running-stats mode (batch statistics would couple every location).
    auto cfg = small_config(4, 32);
    Rng rng(5);
    auto p = init_params<float>(cfg, rng);
    auto x = random_tensor<float>(Shape{1, 3, 32, 32}, rng, 0, 1);
    auto y = x;
    y[0] = 1.0f - y[0];
    const auto a = embed(p, x, BatchNormMode::running_stats)[0];
    const auto b = embed(p, y, BatchNormMode::running_stats)[0];
    const std::size_t far = 8 * 8 - 1;  // bottom-right location
    for (std::size_t c = 0; c < a.dim(); ++c) CHECK(a(c, far) == b(c, far));
}

TEST_CASE("fc head: feature width and identical images") {
    auto cfg = small_config(4, 16);
    Rng rng(6);
    auto p = init_params<float>(cfg, rng);
    HeadConfig hc{12, 7, 3};
    const auto head = init_head<float>(hc, 4 * 4 * 4, rng);
    auto x = random_tensor<float>(Shape{3, 3, 16, 16}, rng, 0, 1);
    std::copy_n(x.data().begin(), 3 * 16 * 16, x.data().begin() + 3 * 16 * 16);
    const auto g = embed_global(p, &head, x, BatchNormMode::running_stats);
    REQUIRE(g.shape() == Shape{3, 7});
    for (std::size_t j = 0; j < 7; ++j) CHECK(g[j] == g[7 + j]);
    CHECK_THROWS_AS(embed_global(p, nullptr, x, BatchNormMode::running_stats), ConfigError);
}

TEST_CASE("embed_global equals the composition of its parts") {
    auto cfg = small_config(4, 16);
    Rng rng(7);
    auto p = init_params<float>(cfg, rng);
    const auto head = init_head<float>(HeadConfig{10, 6, 4}, 64, rng);
    const auto x = random_tensor<float>(Shape{2, 3, 16, 16}, rng, 0, 1);
    const auto g = embed_global(p, &head, x, BatchNormMode::running_stats);

    Tape<float> tape(false);
    ForwardOptions opts;
    opts.mode = BatchNormMode::running_stats;
    auto fmap = embed_features(tape, p, Var<float>::constant(x), opts);
    const auto out = head_forward(tape, head, fmap, float(cfg.leaky_slope));
    CHECK(dn4::testing::max_abs_diff(g, out.features.value()) <= 1e-6);
}

TEST_CASE("checkpoint round-trip reproduces the forward pass bit for bit") {
    auto cfg = small_config(6, 16);
    Rng rng(8);
    auto p = init_params<float>(cfg, rng);
    const auto head = init_head<float>(HeadConfig{9, 5, 3}, 6 * 16, rng);
    const auto x = random_tensor<float>(Shape{3, 3, 16, 16}, rng, 0, 1);

    const auto path = std::filesystem::temp_directory_path() / "dn4_test_embedding.dn4c";
    save_checkpoint(path, to_checkpoint(p, &head));
    const auto ckpt = load_checkpoint(path);
    std::filesystem::remove(path);
    auto q = params_from_checkpoint(ckpt, cfg);
    const auto h2 = head_from_checkpoint(ckpt);
    REQUIRE(h2.has_value());

    const auto a = embed(p, x), b = embed(q, x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_values(a[i].descriptors, b[i].descriptors));
    CHECK(same_values(embed_global(p, &head, x, BatchNormMode::running_stats),
                      embed_global(q, &*h2, x, BatchNormMode::running_stats)));
    CHECK_FALSE(head_from_checkpoint(to_checkpoint(p)).has_value());
}

TEST_CASE("params_from_checkpoint rejects a different filter count") {
    auto cfg = small_config(6, 16);
    Rng rng(8);
    const auto p = init_params<float>(cfg, rng);
    CHECK_THROWS_AS(params_from_checkpoint(to_checkpoint(p), small_config(5, 16)), Error);
}
