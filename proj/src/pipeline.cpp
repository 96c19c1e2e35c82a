#include "dn4/pipeline.hpp"

#include <malloc.h>

namespace dn4 {

Workspace open_workspace(const RunConfig& config) {
    Workspace ws;
    ws.manifest = load_manifest(config.manifest_path());
    ws.split = load_split(config.split_path());
    validate_split(ws.split, ws.manifest);
    ws.store = load_images(ws.manifest);
    return ws;
}

EmbeddingConfig fit_embedding(EmbeddingConfig config, const ImageStore& store) {
    const auto& s = store.image_shape;
    config.input_channels = s.at(0);
    config.height = s.at(1);
    config.width = s.at(2);
    config.validate();
    return config;
}

EmbeddingParams<float> load_model(const std::filesystem::path& path, const EmbeddingConfig& config,
                                  std::optional<FcHead<float>>* head) {
    const auto ckpt = load_checkpoint(path);
    auto params = params_from_checkpoint(ckpt, config);
    if (head) *head = head_from_checkpoint(ckpt);
    return params;
}

void tune_allocator() {
    // glibc caps the threshold at 32 MiB on 64-bit hosts; larger values are ignored.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace dn4
