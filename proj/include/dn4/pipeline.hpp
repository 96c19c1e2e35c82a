#pragma once

#include <filesystem>
#include <optional>

#include "dn4/config.hpp"

namespace dn4 {

/// Manifest, split and decoded images of one dataset.
struct Workspace {
    DatasetManifest manifest;
    ClassSplit split;
    ImageStore store;

    ClassSection section(const std::string& name) const { return make_section(store, split.section(name)); }
};

Workspace open_workspace(const RunConfig& config);

/// Fills the embedding's input extents from the loaded images.
EmbeddingConfig fit_embedding(EmbeddingConfig config, const ImageStore& store);

/// Loads a checkpoint; a missing file raises "checkpoint not found: <path>".
EmbeddingParams<float> load_model(const std::filesystem::path& path, const EmbeddingConfig& config,
                                  std::optional<FcHead<float>>* head = nullptr);

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every op; large activations otherwise go through mmap/munmap.
void tune_allocator();

}  // namespace dn4
