#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "dn4/embedding.hpp"
#include "dn4/episode.hpp"
#include "test_util.hpp"

using namespace dn4;
namespace fs = std::filesystem;

namespace {

// Scratch directory removed at scope exit.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dn4_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// `classes` classes of `per_class` constant 3x8x8 images.
fs::path make_dataset(const fs::path& root, std::size_t classes, std::size_t per_class) {
    std::string manifest;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const std::string rel = "c" + std::to_string(c) + "_" + std::to_string(i) + ".dn4t";
            save_tensor(root / rel, Tensor(Shape{3, 8, 8}, float(c) / float(classes)));
            manifest += rel + "\tclass" + std::to_string(c) + "\n";
        }
    }
    write_file(root / "manifest.tsv", manifest);
    return root / "manifest.tsv";
}

ClassSection fake_section(std::size_t classes, std::size_t per_class) {
    ClassSection s;
    for (std::size_t c = 0; c < classes; ++c) {
        s.names.push_back("c" + std::to_string(c));
        std::vector<std::size_t> imgs;
        for (std::size_t i = 0; i < per_class; ++i) imgs.push_back(c * per_class + i);
        s.images.push_back(imgs);
    }
    return s;
}

void check_episode_structure(const Episode& ep, const ClassSection& section) {
    REQUIRE(ep.support.size() == ep.way * ep.shot);
    REQUIRE(ep.queries.size() == ep.way * ep.queries_per_class);
    std::set<std::size_t> classes(ep.classes.begin(), ep.classes.end());
    CHECK(classes.size() == ep.way);
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
        CHECK(ep.support[i].label == int(i / ep.shot));
        const auto& imgs = section.images[ep.classes[ep.support[i].label]];
        CHECK(std::find(imgs.begin(), imgs.end(), ep.support[i].image) != imgs.end());
        CHECK(seen.insert(ep.support[i].image).second);
    }
    for (std::size_t i = 0; i < ep.queries.size(); ++i) {
        CHECK(ep.queries[i].label == int(i / ep.queries_per_class));
        const auto& imgs = section.images[ep.classes[ep.queries[i].label]];
        CHECK(std::find(imgs.begin(), imgs.end(), ep.queries[i].image) != imgs.end());
        CHECK(seen.insert(ep.queries[i].image).second);  // support and query disjoint
    }
}

}  // namespace

TEST_CASE("manifest: counts, empty file, bad rows and shapes") {
    TempDir dir("manifest");
    const auto path = make_dataset(dir.path, 2, 20);
    const auto m = load_manifest(path);
    CHECK(m.class_counts() == std::map<std::string, std::size_t>{{"class0", 20}, {"class1", 20}});
    CHECK(m.entries.size() == 40);
    CHECK_THROWS_AS(load_manifest(path, 21), IngestionError);

    write_file(dir.path / "empty.tsv", "");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "empty.tsv"), doctest::Contains("no entries"), IngestionError);

    write_file(dir.path / "bad.tsv", "no-tab-here\n");
    CHECK_THROWS_AS(load_manifest(dir.path / "bad.tsv"), IngestionError);

    save_tensor(dir.path / "big.dn4t", Tensor(Shape{3, 84, 84}, 0.5f));
    write_file(dir.path / "big.tsv", "big.dn4t\ta\n");
    CHECK_NOTHROW(load_manifest(dir.path / "big.tsv"));

    save_tensor(dir.path / "flat.dn4t", Tensor(Shape{84, 84}, 0.5f));
    write_file(dir.path / "flat.tsv", "flat.dn4t\ta\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "flat.tsv"), doctest::Contains("shape error"), IngestionError);

    CHECK_THROWS_AS(load_manifest(dir.path / "missing.tsv"), IngestionError);
}

TEST_CASE("manifest save/load round-trip") {
    TempDir dir("manifest_rt");
    auto m = load_manifest(make_dataset(dir.path, 3, 2));
    save_manifest(dir.path / "copy.tsv", m);
    const auto again = load_manifest(dir.path / "copy.tsv");
    CHECK(again.class_counts() == m.class_counts());
    CHECK(again.entries.size() == m.entries.size());
}

TEST_CASE("split: make, save, load and validate") {
    TempDir dir("split");
    const auto m = load_manifest(make_dataset(dir.path, 10, 2));
    const auto s = make_split(m, 6, 2, 2, 4);
    CHECK(s.train.size() == 6);
    CHECK(s.val.size() == 2);
    CHECK(s.test.size() == 2);
    CHECK_NOTHROW(validate_split(s, m));
    std::set<std::string> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 10);

    save_split(dir.path / "split.txt", s);
    const auto back = load_split(dir.path / "split.txt");
    CHECK(back.train == s.train);
    CHECK(back.test == s.test);
    CHECK(make_split(m, 6, 2, 2, 4).train == s.train);

    auto overlap = s;
    overlap.val.push_back(s.train[0]);
    CHECK_THROWS_AS(validate_split(overlap, m), IngestionError);
    auto missing = s;
    missing.test.pop_back();
    CHECK_THROWS_AS(validate_split(missing, m), IngestionError);
    CHECK_THROWS_AS(make_split(m, 6, 2, 3, 4), ConfigError);
    CHECK_THROWS_AS(s.section("holdout"), ConfigError);

    write_file(dir.path / "orphan.txt", "class0\ntrain:\n");
    CHECK_THROWS_AS(load_split(dir.path / "orphan.txt"), IngestionError);
}

TEST_CASE("image store and sections") {
    TempDir dir("store");
    const auto m = load_manifest(make_dataset(dir.path, 3, 4));
    const auto store = load_images(m);
    CHECK(store.images.size() == 12);
    CHECK(store.image_shape == Shape{3, 8, 8});
    const auto section = make_section(store, {"class2", "class0"});
    REQUIRE(section.num_classes() == 2);
    CHECK(section.images[0].size() == 4);
    for (auto i : section.images[0]) CHECK(store.labels[i] == store.class_index.at("class2"));
    CHECK_THROWS_AS(make_section(store, {"nope"}), ConfigError);
    const std::vector<std::size_t> pick{0, 5};
    CHECK(store.batch(pick).shape() == Shape{2, 3, 8, 8});
}

TEST_CASE("episode counts follow way, shot and queries") {
    const auto section = fake_section(10, 30);
    Rng rng(1);
    const auto one = sample_episode(section, 5, 1, 15, rng);
    CHECK(one.support.size() == 5);
    CHECK(one.queries.size() == 75);
    check_episode_structure(one, section);
    const auto five = sample_episode(section, 5, 5, 10, rng);
    CHECK(five.support.size() == 25);
    CHECK(five.queries.size() == 50);
    check_episode_structure(five, section);
}

TEST_CASE("episodes are a pure function of seed, stream and index") {
    const auto section = fake_section(8, 20);
    const auto a = sample_episode(section, 5, 2, 3, 42, Stream::eval, 17);
    const auto b = sample_episode(section, 5, 2, 3, 42, Stream::eval, 17);
    const auto c = sample_episode(section, 5, 2, 3, 42, Stream::eval, 18);
    CHECK(a.hash() == b.hash());
    CHECK(a.query_labels() == b.query_labels());
    CHECK(a.hash() != c.hash());
    CHECK(a.hash() != sample_episode(section, 5, 2, 3, 42, Stream::episode, 17).hash());
}

TEST_CASE("episode sampling errors") {
    const auto section = fake_section(4, 6);
    Rng rng(2);
    CHECK_THROWS_AS(sample_episode(section, 5, 1, 1, rng), SamplingError);
    CHECK_THROWS_AS(sample_episode(section, 3, 2, 5, rng), SamplingError);
    CHECK_THROWS_AS(sample_episode(section, 3, 0, 5, rng), SamplingError);
}

TEST_CASE("classes are drawn uniformly") {
    const auto section = fake_section(10, 5);
    std::vector<double> hits(10, 0.0);
    const std::size_t n = 10000;
    for (std::size_t e = 0; e < n; ++e) {
        const auto ep = sample_episode(section, 2, 1, 1, 5, Stream::episode, e);
        for (auto c : ep.classes) hits[c] += 1.0;
    }
    for (double h : hits) CHECK(std::abs(h / double(n) - 0.2) <= 0.02);
}

TEST_CASE("episode batch layout") {
    TempDir dir("batch");
    const auto store = load_images(load_manifest(make_dataset(dir.path, 3, 4)));
    const auto section = make_section(store, {"class0", "class1", "class2"});
    Rng rng(3);
    const auto ep = sample_episode(section, 3, 2, 1, rng);
    const auto b = make_episode_batch(store, ep);
    CHECK(b.images.shape() == Shape{9, 3, 8, 8});
    REQUIRE(b.layout.support.size() == 3);
    CHECK(b.layout.support[1] == std::vector<std::size_t>{2, 3});
    CHECK(b.layout.queries == std::vector<std::size_t>{6, 7, 8});
    // the first query belongs to episode class 0
    const float expected = store.images[ep.queries[0].image][0];
    CHECK(b.images[6 * 3 * 64] == expected);
}

TEST_CASE("augmentation") {
    Rng rng(4);
    const auto img = dn4::testing::random_tensor<float>(Shape{3, 8, 8}, rng, 0, 1);
    AugmentConfig off;
    Rng r1(1);
    CHECK(augment(img, off, r1).storage() == img.storage());

    CHECK(flip_horizontal(flip_horizontal(img)).storage() == img.storage());
    Tensor sym(Shape{1, 2, 4}, std::vector<float>{1, 2, 2, 1, 3, 4, 4, 3});
    AugmentConfig flip_only{true, 0, 1.0};
    Rng r2(2);
    CHECK(augment(sym, flip_only, r2).storage() == sym.storage());
    Rng r3(3);
    CHECK(augment(augment(img, flip_only, r3), flip_only, r3).storage() == img.storage());

    AugmentConfig crop{true, 2, 0.0};
    Rng r4(5);
    const auto out = augment(img, crop, r4);
    CHECK(out.shape() == img.shape());
    AugmentConfig bad{true, 2, 1.5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("PPM decoding and resizing") {
    TempDir dir("ppm");
    write_file(dir.path / "white.ppm", std::string("P6\n1 1\n255\n") + std::string(3, char(255)));
    const auto w = read_ppm(dir.path / "white.ppm");
    CHECK(w.shape() == Shape{3, 1, 1});
    for (float v : w.data()) CHECK(v == 1.0f);

    const unsigned char px[12] = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120};
    write_file(dir.path / "two.ppm", std::string("P6\n# comment\n2 2\n255\n") + std::string(reinterpret_cast<const char*>(px), 12));
    const auto t = read_ppm(dir.path / "two.ppm");
    REQUIRE(t.shape() == Shape{3, 2, 2});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 4; ++p) CHECK(t[c * 4 + p] == float(px[p * 3 + c]) / 255.0f);

    const auto small = resize_bilinear(Tensor(Shape{3, 4, 4}, 0.25f), 2, 2);
    CHECK(small.shape() == Shape{3, 2, 2});
    for (float v : small.data()) CHECK(v == doctest::Approx(0.25f));

    const auto conv = convert_ppm(dir.path / "two.ppm", dir.path / "two.dn4t", std::make_pair(4, 4));
    CHECK(load_tensor(dir.path / "two.dn4t").shape() == Shape{3, 4, 4});
    CHECK(conv.shape() == Shape{3, 4, 4});

    write_file(dir.path / "p3.ppm", "P3\n1 1\n255\n1 2 3\n");
    CHECK_THROWS_AS(read_ppm(dir.path / "p3.ppm"), FormatError);
    write_file(dir.path / "short.ppm", "P6\n2 2\n255\nab");
    CHECK_THROWS_AS(read_ppm(dir.path / "short.ppm"), FormatError);
}

TEST_CASE("synthetic dataset: layout, counts and texture families") {
    TempDir dir("synth");
    SyntheticConfig cfg;
    cfg.num_classes = 30;
    cfg.images_per_class = 30;
    cfg.size = 16;
    const auto m = make_synthetic_dataset(dir.path, cfg);
    CHECK(m.entries.size() == 900);
    std::ifstream in(dir.path / "manifest.tsv");
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) lines += !l.empty();
    CHECK(lines == 900);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir.path / "images")) files += e.path().extension() == ".dn4t";
    CHECK(files == 900);

    const auto a = render_synthetic_image(cfg, 3, 0), b = render_synthetic_image(cfg, 3, 1);
    CHECK(a.storage() != b.storage());
    CHECK(render_synthetic_image(cfg, 3, 0).storage() == a.storage());
    for (float v : a.data()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("synthetic classes are separable by a frozen random embedding") {
    SyntheticConfig cfg;
    cfg.size = 32;
    EmbeddingConfig ec;
    ec.filters_per_layer = 16;
    ec.height = ec.width = 32;
    Rng rng(6);
    auto params = init_params<float>(ec, rng);

    // mean descriptor of each image, compared within and across classes
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 5; ++i) {
            images.push_back(render_synthetic_image(cfg, c, i));
            labels.push_back(c);
        }
    ImageStore store;
    const auto sets = embed(params, store.batch(images), BatchNormMode::running_stats);
    auto mean_desc = [](const DescriptorSet& s) {
        std::vector<double> v(s.dim(), 0.0);
        for (std::size_t r = 0; r < s.dim(); ++r)
            for (std::size_t j = 0; j < s.count(); ++j) v[r] += s(r, j);
        return v;
    };
    auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
        double d = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
        return d / std::sqrt(na * nb);
    };
    double within = 0, across = 0;
    std::size_t nw = 0, na = 0;
    for (std::size_t i = 0; i < sets.size(); ++i)
        for (std::size_t j = i + 1; j < sets.size(); ++j) {
            const double c = cos(mean_desc(sets[i]), mean_desc(sets[j]));
            if (labels[i] == labels[j]) within += c, ++nw;
            else across += c, ++na;
        }
    CHECK(within / double(nw) > across / double(na));
}
