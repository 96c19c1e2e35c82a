#include "dn4/episode.hpp"

#include <string>

namespace dn4 {

std::vector<int> Episode::query_labels() const {
    std::vector<int> out;
    out.reserve(queries.size());
    for (const auto& q : queries) out.push_back(q.label);
    return out;
}

std::uint64_t Episode::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    feed(way);
    feed(shot);
    feed(queries_per_class);
    for (auto c : classes) feed(c);
    for (const auto& s : support) feed((s.image << 8) ^ static_cast<std::uint64_t>(s.label));
    for (const auto& q : queries) feed((q.image << 8) ^ static_cast<std::uint64_t>(q.label));
    return h;
}

Episode sample_episode(const ClassSection& section, std::size_t way, std::size_t shot, std::size_t queries_per_class,
                       Rng& rng) {
    if (way < 1 || shot < 1) throw SamplingError("way and shot must be >= 1");
    if (section.num_classes() < way) {
        throw SamplingError("section has " + std::to_string(section.num_classes()) + " classes, episode needs " +
                            std::to_string(way));
    }
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.queries_per_class = queries_per_class;
    ep.seed = rng.state();
    ep.classes = rng.sample_without_replacement(section.num_classes(), way);
    const std::size_t need = shot + queries_per_class;
    std::vector<std::vector<std::size_t>> picked;
    for (auto c : ep.classes) {
        const auto& imgs = section.images[c];
        if (imgs.size() < need) {
            throw SamplingError("class '" + section.names[c] + "' has " + std::to_string(imgs.size()) +
                                " images, episode needs " + std::to_string(need));
        }
        picked.push_back(rng.sample_without_replacement(imgs.size(), need));
    }
    for (std::size_t label = 0; label < way; ++label) {
        const auto& imgs = section.images[ep.classes[label]];
        for (std::size_t i = 0; i < shot; ++i) ep.support.push_back({imgs[picked[label][i]], static_cast<int>(label)});
    }
    for (std::size_t label = 0; label < way; ++label) {
        const auto& imgs = section.images[ep.classes[label]];
        for (std::size_t i = shot; i < need; ++i) ep.queries.push_back({imgs[picked[label][i]], static_cast<int>(label)});
    }
    return ep;
}

Episode sample_episode(const ClassSection& section, std::size_t way, std::size_t shot, std::size_t queries_per_class,
                       std::uint64_t seed, Stream stream, std::uint64_t index) {
    Rng rng = Rng::substream(seed, stream, index);
    Episode ep = sample_episode(section, way, shot, queries_per_class, rng);
    ep.seed = seed;
    return ep;
}

void AugmentConfig::validate() const {
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
        throw ConfigError("flip_probability must lie in [0, 1]");
    }
}

Tensor flip_horizontal(const Tensor& image) {
    require_rank(image.shape(), 3, "flip_horizontal");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out(image.shape());
    for (std::size_t p = 0; p < c * h; ++p) {
        for (std::size_t x = 0; x < w; ++x) out[p * w + x] = image[p * w + (w - 1 - x)];
    }
    return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
    require_rank(image.shape(), 3, "augment");
    if (!cfg.enabled) return image;
    cfg.validate();
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), pad = cfg.crop_padding;
    Tensor out = image;
    if (pad > 0) {
        // Offsets into the zero-padded canvas of size (h + 2 pad) x (w + 2 pad).
        const auto oy = static_cast<long>(rng.below(2 * pad + 1)) - static_cast<long>(pad);
        const auto ox = static_cast<long>(rng.below(2 * pad + 1)) - static_cast<long>(pad);
        out.fill(0.0f);
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                const long sy = static_cast<long>(y) + oy;
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (std::size_t x = 0; x < w; ++x) {
                    const long sx = static_cast<long>(x) + ox;
                    if (sx < 0 || sx >= static_cast<long>(w)) continue;
                    out[(ch * h + y) * w + x] = image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
                }
            }
        }
    }
    if (rng.bernoulli(cfg.flip_probability)) out = flip_horizontal(out);
    return out;
}

EpisodeBatch make_episode_batch(const ImageStore& store, const Episode& episode, const AugmentConfig* augment_cfg,
                                Rng* rng) {
    EpisodeBatch batch;
    std::vector<Tensor> imgs;
    imgs.reserve(episode.support.size() + episode.queries.size());
    batch.layout.support.assign(episode.way, {});
    auto push = [&](const EpisodeImage& e) {
        const Tensor& src = store.images.at(e.image);
        imgs.push_back(augment_cfg != nullptr && rng != nullptr ? augment(src, *augment_cfg, *rng) : src);
        return imgs.size() - 1;
    };
    for (const auto& s : episode.support) batch.layout.support[static_cast<std::size_t>(s.label)].push_back(push(s));
    for (const auto& q : episode.queries) batch.layout.queries.push_back(push(q));
    batch.images = store.batch(imgs);
    return batch;
}

}  // namespace dn4
