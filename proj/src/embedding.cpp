#include "dn4/embedding.hpp"

#include <cmath>
#include <string>

namespace dn4 {

void EmbeddingConfig::validate() const {
    if (filters_per_layer < 1) throw ConfigError("filters_per_layer must be >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
        throw ConfigError("input size must be positive and divisible by 4, got " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in (0, 1)");
    if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
}

DescriptorCount descriptor_count(const EmbeddingConfig& config) {
    config.validate();
    const std::size_t h = config.height / 4, w = config.width / 4;
    return {h, w, h * w, config.filters_per_layer};
}

template <class T>
BasicDescriptorSet<T>::BasicDescriptorSet(BasicTensor<T> desc, std::size_t hh, std::size_t ww)
    : descriptors(std::move(desc)), h(hh), w(ww) {
    require_rank(descriptors.shape(), 2, "descriptor set");
    if (descriptors.dim(1) != h * w) {
        throw DimensionError("descriptor set has " + std::to_string(descriptors.dim(1)) + " columns for a " +
                             std::to_string(h) + "x" + std::to_string(w) + " map");
    }
}

template <class T>
std::vector<Var<T>> EmbeddingParams<T>::parameters() const {
    std::vector<Var<T>> out;
    for (const auto& b : blocks) {
        out.insert(out.end(), {b.conv_weight, b.conv_bias, b.bn_gamma, b.bn_beta});
    }
    return out;
}

template <class T>
EmbeddingParams<T> EmbeddingParams<T>::clone() const {
    EmbeddingParams<T> copy;
    copy.config = config;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        auto& c = copy.blocks[i];
        c.conv_weight = Var<T>::leaf(b.conv_weight.value(), b.conv_weight.requires_grad());
        c.conv_bias = Var<T>::leaf(b.conv_bias.value(), b.conv_bias.requires_grad());
        c.bn_gamma = Var<T>::leaf(b.bn_gamma.value(), b.bn_gamma.requires_grad());
        c.bn_beta = Var<T>::leaf(b.bn_beta.value(), b.bn_beta.requires_grad());
        c.running = b.running;
    }
    return copy;
}

namespace {

template <class T>
BasicTensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    BasicTensor<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

}  // namespace

template <class T>
EmbeddingParams<T> init_params(const EmbeddingConfig& config, Rng& rng) {
    config.validate();
    EmbeddingParams<T> params;
    params.config = config;
    const std::size_t f = config.filters_per_layer;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t cin = i == 0 ? config.input_channels : f;
        auto& b = params.blocks[i];
        b.conv_weight = Var<T>::leaf(he_normal<T>(Shape{f, cin, 3, 3}, cin * 9, rng), true);
        b.conv_bias = Var<T>::leaf(BasicTensor<T>(Shape{f}, T{0}), true);
        b.bn_gamma = Var<T>::leaf(BasicTensor<T>(Shape{f}, T{1}), true);
        b.bn_beta = Var<T>::leaf(BasicTensor<T>(Shape{f}, T{0}), true);
        b.running = RunningStats<T>(f);
    }
    return params;
}

template <class T>
Var<T> embed_features(Tape<T>& tape, EmbeddingParams<T>& params, const Var<T>& images,
                      const ForwardOptions& options) {
    const auto& cfg = params.config;
    require_rank(images.shape(), 4, "embed input");
    const Shape& s = images.shape();
    if (s[1] != cfg.input_channels || s[2] != cfg.height || s[3] != cfg.width) {
        throw DimensionError("embed: expected [N," + std::to_string(cfg.input_channels) + "," +
                             std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "] input, got " +
                             shape_string(s));
    }
    BatchNormOptions bn;
    bn.mode = options.mode;
    bn.eps = cfg.bn_eps;
    bn.update_running = options.update_running;
    const T slope = static_cast<T>(cfg.leaky_slope);

    Var<T> x = images;
    for (std::size_t i = 0; i < 4; ++i) {
        auto& b = params.blocks[i];
        x = ops::conv2d(tape, x, b.conv_weight, b.conv_bias);
        x = ops::batchnorm2d(tape, x, b.bn_gamma, b.bn_beta, &b.running, bn);
        x = ops::leaky_relu(tape, x, slope);
        if (i < 2) x = ops::maxpool2d(tape, x);
    }
    return x;
}

template <class T>
std::vector<BasicDescriptorSet<T>> to_descriptor_sets(const BasicTensor<T>& features) {
    require_rank(features.shape(), 4, "descriptor feature map");
    const std::size_t n = features.dim(0), d = features.dim(1), h = features.dim(2), w = features.dim(3);
    const std::size_t per = d * h * w;
    std::vector<BasicDescriptorSet<T>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto first = features.data().begin() + static_cast<std::ptrdiff_t>(i * per);
        std::vector<T> buf(first, first + static_cast<std::ptrdiff_t>(per));
        out.emplace_back(BasicTensor<T>(Shape{d, h * w}, std::move(buf)), h, w);
    }
    return out;
}

std::vector<DescriptorSet> embed(EmbeddingParams<float>& params, const Tensor& images, BatchNormMode mode) {
    Tape<float> tape(false);
    auto features = embed_features(tape, params, Var<float>::constant(images), ForwardOptions{mode, false});
    return to_descriptor_sets(features.value());
}

std::vector<DescriptorSet> embed(EmbeddingParams<float>& params, const Tensor& images) {
    return embed(params, images, params.config.batchnorm_mode);
}

template <class T>
std::vector<Var<T>> FcHead<T>::parameters() const {
    std::vector<Var<T>> out;
    for (const auto& l : layers) out.insert(out.end(), {l.weight, l.bias});
    return out;
}

template <class T>
FcHead<T> init_head(const HeadConfig& config, std::size_t in_features, Rng& rng) {
    if (config.num_classes < 1 || config.hidden1 < 1 || config.hidden2 < 1) {
        throw ConfigError("FC head widths must be positive");
    }
    FcHead<T> head;
    head.config = config;
    head.in_features = in_features;
    const std::array<std::size_t, 4> widths{in_features, config.hidden1, config.hidden2, config.num_classes};
    for (std::size_t i = 0; i < 3; ++i) {
        head.layers[i].weight = Var<T>::leaf(he_normal<T>(Shape{widths[i + 1], widths[i]}, widths[i], rng), true);
        head.layers[i].bias = Var<T>::leaf(BasicTensor<T>(Shape{widths[i + 1]}, T{0}), true);
    }
    return head;
}

template <class T>
HeadOutput<T> head_forward(Tape<T>& tape, const FcHead<T>& head, const Var<T>& feature_map, T slope) {
    const std::size_t n = feature_map.shape().at(0);
    const std::size_t flat = shape_size(feature_map.shape()) / n;
    if (flat != head.in_features) {
        throw DimensionError("FC head expects " + std::to_string(head.in_features) + " input features, got " +
                             std::to_string(flat));
    }
    auto x = ops::reshape(tape, feature_map, Shape{n, flat});
    x = ops::leaky_relu(tape, ops::fully_connected(tape, x, head.layers[0].weight, head.layers[0].bias), slope);
    auto features =
        ops::leaky_relu(tape, ops::fully_connected(tape, x, head.layers[1].weight, head.layers[1].bias), slope);
    auto logits = ops::fully_connected(tape, features, head.layers[2].weight, head.layers[2].bias);
    return {features, logits};
}

Tensor embed_global(EmbeddingParams<float>& params, const FcHead<float>* head, const Tensor& images,
                    BatchNormMode mode) {
    if (head == nullptr) throw ConfigError("embed_global requires pretrained fc parameters");
    Tape<float> tape(false);
    auto fmap = embed_features(tape, params, Var<float>::constant(images), ForwardOptions{mode, false});
    return head_forward(tape, *head, fmap, static_cast<float>(params.config.leaky_slope)).features.value();
}

Checkpoint to_checkpoint(const EmbeddingParams<float>& params, const FcHead<float>* head) {
    Checkpoint ckpt;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& b = params.blocks[i];
        const std::string p = "block" + std::to_string(i + 1) + ".";
        ckpt.add(p + "conv.weight", b.conv_weight.value());
        ckpt.add(p + "conv.bias", b.conv_bias.value());
        ckpt.add(p + "bn.gamma", b.bn_gamma.value());
        ckpt.add(p + "bn.beta", b.bn_beta.value());
        ckpt.add(p + "bn.running_mean", b.running.mean);
        ckpt.add(p + "bn.running_var", b.running.var);
    }
    if (head != nullptr) {
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string p = "fc" + std::to_string(i + 1) + ".";
            ckpt.add(p + "weight", head->layers[i].weight.value());
            ckpt.add(p + "bias", head->layers[i].bias.value());
        }
    }
    return ckpt;
}

EmbeddingParams<float> params_from_checkpoint(const Checkpoint& ckpt, const EmbeddingConfig& config) {
    config.validate();
    EmbeddingParams<float> params;
    params.config = config;
    const std::size_t f = config.filters_per_layer;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t cin = i == 0 ? config.input_channels : f;
        const std::string p = "block" + std::to_string(i + 1) + ".";
        auto& b = params.blocks[i];
        auto fetch = [&](const std::string& name, const Shape& shape) {
            const Tensor& t = ckpt.at(p + name);
            require_shape(t.shape(), shape, (p + name).c_str());
            return t;
        };
        b.conv_weight = Var<float>::leaf(fetch("conv.weight", Shape{f, cin, 3, 3}), true);
        b.conv_bias = Var<float>::leaf(fetch("conv.bias", Shape{f}), true);
        b.bn_gamma = Var<float>::leaf(fetch("bn.gamma", Shape{f}), true);
        b.bn_beta = Var<float>::leaf(fetch("bn.beta", Shape{f}), true);
        b.running = RunningStats<float>(f);
        if (ckpt.contains(p + "bn.running_mean")) {
            b.running.mean = fetch("bn.running_mean", Shape{f});
            b.running.var = fetch("bn.running_var", Shape{f});
        }
    }
    return params;
}

std::optional<FcHead<float>> head_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.contains("fc1.weight")) return std::nullopt;
    FcHead<float> head;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string p = "fc" + std::to_string(i + 1) + ".";
        const Tensor& w = ckpt.at(p + "weight");
        const Tensor& b = ckpt.at(p + "bias");
        require_rank(w.shape(), 2, (p + "weight").c_str());
        require_shape(b.shape(), Shape{w.dim(0)}, (p + "bias").c_str());
        if (i > 0 && w.dim(1) != head.layers[i - 1].weight.shape()[0]) {
            throw DimensionError("FC head layer widths do not chain at " + p);
        }
        head.layers[i] = {Var<float>::leaf(w, true), Var<float>::leaf(b, true)};
    }
    head.in_features = head.layers[0].weight.shape()[1];
    head.config = {head.layers[0].weight.shape()[0], head.layers[1].weight.shape()[0],
                   head.layers[2].weight.shape()[0]};
    return head;
}

template struct BasicDescriptorSet<float>;
template struct BasicDescriptorSet<double>;
template struct EmbeddingParams<float>;
template struct EmbeddingParams<double>;
template struct FcHead<float>;
template struct FcHead<double>;
template EmbeddingParams<float> init_params(const EmbeddingConfig&, Rng&);
template EmbeddingParams<double> init_params(const EmbeddingConfig&, Rng&);
template Var<float> embed_features(Tape<float>&, EmbeddingParams<float>&, const Var<float>&, const ForwardOptions&);
template Var<double> embed_features(Tape<double>&, EmbeddingParams<double>&, const Var<double>&,
                                    const ForwardOptions&);
template std::vector<BasicDescriptorSet<float>> to_descriptor_sets(const BasicTensor<float>&);
template std::vector<BasicDescriptorSet<double>> to_descriptor_sets(const BasicTensor<double>&);
template FcHead<float> init_head(const HeadConfig&, std::size_t, Rng&);
template FcHead<double> init_head(const HeadConfig&, std::size_t, Rng&);
template HeadOutput<float> head_forward(Tape<float>&, const FcHead<float>&, const Var<float>&, float);
template HeadOutput<double> head_forward(Tape<double>&, const FcHead<double>&, const Var<double>&, double);

}  // namespace dn4
