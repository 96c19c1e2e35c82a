#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dn4/rng.hpp"
#include "dn4/tensor.hpp"

namespace dn4 {

struct ManifestEntry {
    std::string path;  // relative to the manifest's root directory
    std::string class_name;
};

/// UTF-8 text, one "relative/path<TAB>class_name" per line.
struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;
    std::map<std::string, std::vector<std::size_t>> by_class;  // entry indices per class

    std::vector<std::string> class_names() const;
    std::map<std::string, std::size_t> class_counts() const;
};

/// Parses and validates a manifest: every entry must be a 3-D DN4T tensor
/// (C x H x W, same shape for all entries) and every class must hold at
/// least `min_per_class` images.
DatasetManifest load_manifest(const std::filesystem::path& path, std::size_t min_per_class = 1);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct ClassSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;

    const std::vector<std::string>& section(const std::string& name) const;
};

/// Sections "train:", "val:", "test:", each followed by class names one per line.
ClassSplit load_split(const std::filesystem::path& path);
void save_split(const std::filesystem::path& path, const ClassSplit& split);
/// Pairwise disjoint and covering the manifest's classes.
void validate_split(const ClassSplit& split, const DatasetManifest& manifest);
/// Random partition of the manifest's classes with the given section sizes.
ClassSplit make_split(const DatasetManifest& manifest, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                      std::uint64_t seed);

/// All images of a manifest, decoded in memory.
struct ImageStore {
    std::vector<std::string> class_names;
    std::map<std::string, std::size_t> class_index;
    std::vector<Tensor> images;        // each [C, H, W], values in [0, 1]
    std::vector<std::size_t> labels;   // index into class_names
    Shape image_shape;

    /// [N, C, H, W] stack of the selected images.
    Tensor batch(std::span<const std::size_t> indices) const;
    Tensor batch(std::span<const Tensor> images) const;
};

ImageStore load_images(const DatasetManifest& manifest);

/// Classes of one split section and the store indices of their images.
struct ClassSection {
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> images;

    std::size_t num_classes() const { return names.size(); }
};

ClassSection make_section(const ImageStore& store, const std::vector<std::string>& class_names);

// ---- image conversion ----

/// Binary "P6" PPM with maxval 255 -> [3, H, W] tensor of pixel / 255.
Tensor read_ppm(const std::filesystem::path& path);
/// Bilinear resize with half-pixel centers; [C, H, W] -> [C, height, width].
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
/// Reads a PPM and writes a DN4T tensor, optionally resized.
Tensor convert_ppm(const std::filesystem::path& in, const std::filesystem::path& out,
                   std::optional<std::pair<std::size_t, std::size_t>> size = std::nullopt);

// ---- synthetic texture dataset ----

struct SyntheticConfig {
    std::size_t num_classes = 45;
    std::size_t images_per_class = 30;
    std::size_t size = 32;
    std::size_t motifs_per_class = 2;
    std::size_t motifs_per_image = 2;
    std::size_t patches_per_image = 6;
    double noise = 0.08;
    std::uint64_t seed = 0;
};

/// Renders one image of class `class_id`. Each class owns a family of
/// oriented, colored gratings ("motifs"); an image shows randomly placed
/// Gaussian-windowed patches from a random subset of its class's motifs, with
/// random phase and additive noise.
Tensor render_synthetic_image(const SyntheticConfig& config, std::size_t class_id, std::size_t image_index);

/// Writes images/<class>/<i>.dn4t plus manifest.tsv under `out_dir`.
DatasetManifest make_synthetic_dataset(const std::filesystem::path& out_dir, const SyntheticConfig& config);

}  // namespace dn4
