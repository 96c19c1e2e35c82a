#include "dn4/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dn4/serialize.hpp"

namespace dn4 {

namespace fs = std::filesystem;

std::vector<std::string> DatasetManifest::class_names() const {
    std::vector<std::string> out;
    for (const auto& [name, idx] : by_class) out.push_back(name);
    return out;
}

std::map<std::string, std::size_t> DatasetManifest::class_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& [name, idx] : by_class) out[name] = idx.size();
    return out;
}

DatasetManifest load_manifest(const fs::path& path, std::size_t min_per_class) {
    std::ifstream in(path);
    if (!in) throw IngestionError("manifest not found: " + path.string());
    DatasetManifest manifest;
    manifest.root = path.parent_path();
    std::string line;
    std::size_t line_no = 0;
    std::optional<Shape> common;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
            throw IngestionError("manifest line " + std::to_string(line_no) + ": expected 'path<TAB>class'");
        }
        ManifestEntry entry{line.substr(0, tab), line.substr(tab + 1)};
        const fs::path file = manifest.root / entry.path;
        Shape shape;
        try {
            shape = load_tensor_shape(file);
        } catch (const Error& e) {
            throw IngestionError("manifest entry '" + entry.path + "': " + e.what());
        }
        if (shape.size() != 3) {
            throw IngestionError("manifest entry '" + entry.path + "': shape error, expected C x H x W, got " +
                                 shape_string(shape));
        }
        if (common && *common != shape) {
            throw IngestionError("manifest entry '" + entry.path + "': shape error, " + shape_string(shape) +
                                 " differs from " + shape_string(*common));
        }
        common = shape;
        manifest.by_class[entry.class_name].push_back(manifest.entries.size());
        manifest.entries.push_back(std::move(entry));
    }
    if (manifest.entries.empty()) throw IngestionError("manifest " + path.string() + ": no entries");
    for (const auto& [name, idx] : manifest.by_class) {
        if (idx.size() < min_per_class) {
            throw IngestionError("class '" + name + "' has " + std::to_string(idx.size()) + " images, needs " +
                                 std::to_string(min_per_class));
        }
    }
    return manifest;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest: " + path.string());
    for (const auto& e : manifest.entries) out << e.path << '\t' << e.class_name << '\n';
}

const std::vector<std::string>& ClassSplit::section(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split section '" + name + "' (expected train, val or test)");
}

ClassSplit load_split(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("split file not found: " + path.string());
    ClassSplit split;
    std::vector<std::string>* current = nullptr;
    std::string line;
    std::set<std::string> seen_sections;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "train:" || line == "val:" || line == "test:") {
            const std::string name = line.substr(0, line.size() - 1);
            if (!seen_sections.insert(name).second) throw IngestionError("split section repeated: " + line);
            current = name == "train" ? &split.train : name == "val" ? &split.val : &split.test;
            continue;
        }
        if (current == nullptr) throw IngestionError("split file: class '" + line + "' before any section header");
        current->push_back(line);
    }
    if (seen_sections.size() != 3) throw IngestionError("split file must contain train:, val: and test: sections");
    return split;
}

void save_split(const fs::path& path, const ClassSplit& split) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write split: " + path.string());
    for (const auto& [name, classes] : {std::pair{"train", &split.train}, std::pair{"val", &split.val},
                                        std::pair{"test", &split.test}}) {
        out << name << ":\n";
        for (const auto& c : *classes) out << c << '\n';
    }
}

void validate_split(const ClassSplit& split, const DatasetManifest& manifest) {
    std::set<std::string> all;
    for (const auto* section : {&split.train, &split.val, &split.test}) {
        for (const auto& c : *section) {
            if (!all.insert(c).second) throw IngestionError("class '" + c + "' appears in more than one split section");
            if (!manifest.by_class.contains(c)) throw IngestionError("split class '" + c + "' not in manifest");
        }
    }
    for (const auto& [name, idx] : manifest.by_class) {
        if (!all.contains(name)) throw IngestionError("manifest class '" + name + "' missing from split");
    }
}

ClassSplit make_split(const DatasetManifest& manifest, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                      std::uint64_t seed) {
    auto names = manifest.class_names();
    if (n_train + n_val + n_test != names.size()) {
        throw ConfigError("split sizes " + std::to_string(n_train) + "/" + std::to_string(n_val) + "/" +
                          std::to_string(n_test) + " do not add up to " + std::to_string(names.size()) + " classes");
    }
    Rng rng = Rng::substream(seed, Stream::split);
    rng.shuffle(names.begin(), names.end());
    ClassSplit split;
    split.train.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(names.begin() + static_cast<std::ptrdiff_t>(n_train),
                     names.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(names.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), names.end());
    return split;
}

Tensor ImageStore::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ContractError("empty image batch");
    const std::size_t per = shape_size(image_shape);
    std::vector<float> data(indices.size() * per);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& img = images.at(indices[i]);
        std::copy(img.data().begin(), img.data().end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), image_shape.begin(), image_shape.end());
    return Tensor(std::move(shape), std::move(data));
}

Tensor ImageStore::batch(std::span<const Tensor> imgs) const {
    if (imgs.empty()) throw ContractError("empty image batch");
    const std::size_t per = shape_size(imgs[0].shape());
    std::vector<float> data;
    data.reserve(imgs.size() * per);
    for (const auto& img : imgs) {
        require_shape(img.shape(), imgs[0].shape(), "batched image");
        data.insert(data.end(), img.data().begin(), img.data().end());
    }
    Shape shape{imgs.size()};
    shape.insert(shape.end(), imgs[0].shape().begin(), imgs[0].shape().end());
    return Tensor(std::move(shape), std::move(data));
}

ImageStore load_images(const DatasetManifest& manifest) {
    ImageStore store;
    store.class_names = manifest.class_names();
    for (std::size_t i = 0; i < store.class_names.size(); ++i) store.class_index[store.class_names[i]] = i;
    store.images.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        Tensor t;
        try {
            t = load_tensor(manifest.root / e.path);
        } catch (const Error& err) {
            throw IngestionError("manifest entry '" + e.path + "': " + err.what());
        }
        for (float v : t.data()) {
            if (!(v >= 0.0f && v <= 1.0f)) {
                throw IngestionError("manifest entry '" + e.path + "': pixel values must lie in [0, 1]");
            }
        }
        if (store.image_shape.empty()) store.image_shape = t.shape();
        if (t.shape() != store.image_shape) throw IngestionError("manifest entry '" + e.path + "': shape error");
        store.images.push_back(std::move(t));
        store.labels.push_back(store.class_index.at(e.class_name));
    }
    return store;
}

ClassSection make_section(const ImageStore& store, const std::vector<std::string>& class_names) {
    ClassSection section;
    for (const auto& name : class_names) {
        const auto it = store.class_index.find(name);
        if (it == store.class_index.end()) throw ConfigError("section class '" + name + "' not in dataset");
        section.names.push_back(name);
        std::vector<std::size_t> imgs;
        for (std::size_t i = 0; i < store.labels.size(); ++i) {
            if (store.labels[i] == it->second) imgs.push_back(i);
        }
        section.images.push_back(std::move(imgs));
    }
    return section;
}

// ---- PPM ----

namespace {

std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

std::size_t parse_positive(const std::string& tok, const char* what) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); })) {
        throw FormatError(std::string("PPM: bad ") + what + " '" + tok + "'");
    }
    const auto v = std::stoul(tok);
    if (v == 0) throw FormatError(std::string("PPM: ") + what + " must be positive");
    return v;
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open PPM: " + path.string());
    if (next_token(in) != "P6") throw FormatError("PPM: not a binary P6 file: " + path.string());
    const std::size_t w = parse_positive(next_token(in), "width");
    const std::size_t h = parse_positive(next_token(in), "height");
    const std::size_t maxval = parse_positive(next_token(in), "maxval");
    if (maxval != 255) throw FormatError("PPM: only maxval 255 is supported");
    std::vector<unsigned char> bytes(w * h * 3);
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw FormatError("PPM: truncated payload in " + path.string());
    }
    Tensor out(Shape{3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                out[(c * h + y) * w + x] = static_cast<float>(bytes[(y * w + x) * 3 + c]) / 255.0f;
            }
        }
    }
    return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
    require_rank(image.shape(), 3, "resize_bilinear");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out(Shape{c, height, width});
    const double sy = static_cast<double>(h) / static_cast<double>(height);
    const double sx = static_cast<double>(w) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const float* p = image.data().data() + ch * h * w;
                const double top = (1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1];
                const double bot = (1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1];
                out[(ch * height + y) * width + x] = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

Tensor convert_ppm(const fs::path& in, const fs::path& out, std::optional<std::pair<std::size_t, std::size_t>> size) {
    Tensor t = read_ppm(in);
    if (size) t = resize_bilinear(t, size->first, size->second);
    save_tensor(out, t);
    return t;
}

// ---- synthetic textures ----

namespace {

struct Motif {
    double theta;
    double frequency;  // cycles per pixel at 32 px
    std::array<double, 3> color;
};

std::vector<Motif> class_motifs(const SyntheticConfig& cfg, std::size_t class_id) {
    Rng rng = Rng::substream(cfg.seed, Stream::synth, class_id);
    std::vector<Motif> motifs(cfg.motifs_per_class);
    for (auto& m : motifs) {
        m.theta = rng.uniform(0.0, std::numbers::pi);
        m.frequency = rng.uniform(0.10, 0.40);
        for (auto& c : m.color) c = rng.uniform(-1.0, 1.0);
    }
    return motifs;
}

}  // namespace

Tensor render_synthetic_image(const SyntheticConfig& cfg, std::size_t class_id, std::size_t image_index) {
    if (cfg.num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (cfg.motifs_per_image < 1 || cfg.motifs_per_image > cfg.motifs_per_class) {
        throw ConfigError("motifs_per_image must lie in [1, motifs_per_class]");
    }
    const auto motifs = class_motifs(cfg, class_id);
    Rng rng = Rng::substream(cfg.seed, Stream::synth, (std::uint64_t{class_id + 1} << 32) | image_index);
    const auto chosen = rng.sample_without_replacement(motifs.size(), cfg.motifs_per_image);

    const std::size_t s = cfg.size;
    const double scale = static_cast<double>(s) / 32.0;
    std::vector<double> canvas(3 * s * s, 0.5);
    for (std::size_t p = 0; p < cfg.patches_per_image; ++p) {
        const Motif& m = motifs[chosen[p % chosen.size()]];
        const double cx = rng.uniform(0.0, static_cast<double>(s));
        const double cy = rng.uniform(0.0, static_cast<double>(s));
        const double sigma = rng.uniform(2.5, 4.5) * scale;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double theta = m.theta + rng.uniform(-0.1, 0.1);
        const double freq = m.frequency * rng.uniform(0.95, 1.05) / scale;
        const double kx = std::cos(theta) * 2.0 * std::numbers::pi * freq;
        const double ky = std::sin(theta) * 2.0 * std::numbers::pi * freq;
        const double reach = 3.0 * sigma;
        const auto y_lo = static_cast<std::size_t>(std::max(0.0, cy - reach));
        const auto y_hi = static_cast<std::size_t>(std::min(static_cast<double>(s), cy + reach + 1));
        const auto x_lo = static_cast<std::size_t>(std::max(0.0, cx - reach));
        const auto x_hi = static_cast<std::size_t>(std::min(static_cast<double>(s), cx + reach + 1));
        for (std::size_t y = y_lo; y < y_hi; ++y) {
            for (std::size_t x = x_lo; x < x_hi; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                const double wave = std::cos(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
                for (std::size_t c = 0; c < 3; ++c) {
                    canvas[(c * s + y) * s + x] += 0.35 * env * (0.6 * wave + 0.4) * m.color[c];
                }
            }
        }
    }
    Tensor out(Shape{3, s, s});
    for (std::size_t i = 0; i < canvas.size(); ++i) {
        out[i] = static_cast<float>(std::clamp(canvas[i] + cfg.noise * rng.normal(), 0.0, 1.0));
    }
    return out;
}

DatasetManifest make_synthetic_dataset(const fs::path& out_dir, const SyntheticConfig& cfg) {
    if (cfg.num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    fs::create_directories(out_dir / "images");
    DatasetManifest manifest;
    manifest.root = out_dir;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        char name[32];
        std::snprintf(name, sizeof name, "class_%03zu", c);
        fs::create_directories(out_dir / "images" / name);
        for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
            char file[64];
            std::snprintf(file, sizeof file, "images/%s/%03zu.dn4t", name, i);
            save_tensor(out_dir / file, render_synthetic_image(cfg, c, i));
            manifest.by_class[name].push_back(manifest.entries.size());
            manifest.entries.push_back({file, name});
        }
    }
    save_manifest(out_dir / "manifest.tsv", manifest);
    return manifest;
}

}  // namespace dn4
