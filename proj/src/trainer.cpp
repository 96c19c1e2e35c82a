#include "dn4/trainer.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

namespace dn4 {

void adam_step(std::span<Var<float>> params, AdamState& state, double lr, const AdamConfig& cfg) {
    if (state.first.empty()) {
        for (const auto& p : params) {
            state.first.emplace_back(p.shape());
            state.second.emplace_back(p.shape());
        }
    }
    if (state.first.size() != params.size()) {
        throw ContractError("Adam state holds " + std::to_string(state.first.size()) + " slots for " +
                            std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].has_grad() && !params[i].grad().all_finite()) {
            throw NumericError("non-finite gradient in parameter " + std::to_string(i) + " " +
                               shape_string(params[i].shape()));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_value().data();
        auto m = state.first[i].data();
        auto v = state.second[i].data();
        const bool has = params[i].has_grad();
        const float* g = has ? params[i].grad().data().data() : nullptr;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = static_cast<float>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
            v[j] = static_cast<float>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
            const double mh = m[j] / c1;
            const double vh = v[j] / c2;
            w[j] = static_cast<float>(w[j] - lr * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
}

void TrainConfig::validate() const {
    if (way < 2) throw ConfigError("way must be >= 2");
    if (shot < 1) throw ConfigError("shot must be >= 1");
    if (queries_per_class < 1) throw ConfigError("queries_per_class must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (lr_halve_every < 1) throw ConfigError("lr_halve_every must be >= 1");
    if (measure.k_neighbors < 1) throw ConfigError("k_neighbors must be >= 1");
    if (!(score_scale > 0.0)) throw ConfigError("score_scale must be positive");
    augment.validate();
    embedding.validate();
}

double lr_at(std::size_t episode_index, const TrainConfig& cfg) {
    return cfg.learning_rate * std::pow(0.5, static_cast<double>(episode_index / cfg.lr_halve_every));
}

template <class T>
Var<T> episode_loss(Tape<T>& tape, const Var<T>& z, std::span<const int> true_labels, T scale) {
    require_rank(z.shape(), 2, "episode scores");
    if (z.shape()[0] != true_labels.size()) {
        throw DimensionError("episode loss: " + std::to_string(z.shape()[0]) + " score rows for " +
                             std::to_string(true_labels.size()) + " labels");
    }
    const auto classes = static_cast<int>(z.shape()[1]);
    for (int label : true_labels) {
        if (label < 0 || label >= classes) {
            throw ContractError("episode loss: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(classes) + ")");
        }
    }
    auto logits = scale == T{1} ? z : ops::scale(tape, z, scale);
    return ops::cross_entropy(tape, logits, true_labels);
}

template Var<float> episode_loss(Tape<float>&, const Var<float>&, std::span<const int>, float);
template Var<double> episode_loss(Tape<double>&, const Var<double>&, std::span<const int>, double);

std::string LogRecord::to_json() const {
    nlohmann::ordered_json j;
    j["episode"] = episode;
    j["loss"] = loss;
    j["lr"] = lr;
    if (val_acc) j["val_acc"] = *val_acc;
    return j.dump();
}

double episode_accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size() || labels.empty()) {
        throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor score_episode(EmbeddingParams<float>& params, const ImageStore& store, const Episode& episode,
                     const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode) {
    auto batch = make_episode_batch(store, episode);
    Tape<float> tape(false);
    auto features = embed_features(tape, params, Var<float>::constant(std::move(batch.images)),
                                   ForwardOptions{mode, false});
    return episode_scores(tape, features, batch.layout, measure, variant).value();
}

std::vector<int> predict_episode(EmbeddingParams<float>& params, const ImageStore& store, const Episode& episode,
                                 const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode) {
    const Tensor z = score_episode(params, store, episode, measure, variant, mode);
    const std::size_t q = z.dim(0), c = z.dim(1);
    std::vector<int> out(q);
    for (std::size_t i = 0; i < q; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (z[i * c + j] > z[i * c + best]) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

namespace {

double validate_model(EmbeddingParams<float>& params, const ImageStore& store, const ClassSection& val,
                      const TrainConfig& cfg) {
    double total = 0.0;
    for (std::size_t i = 0; i < cfg.val_episodes; ++i) {
        auto ep = sample_episode(val, cfg.way, cfg.shot, cfg.val_queries_per_class, cfg.seed, Stream::validation, i);
        auto pred = predict_episode(params, store, ep, cfg.measure, cfg.variant, cfg.embedding.batchnorm_mode);
        total += episode_accuracy(pred, ep.query_labels());
    }
    return total / static_cast<double>(cfg.val_episodes);
}

}  // namespace

TrainResult train(const TrainConfig& config, const ImageStore& store, const ClassSplit& split,
                  const TrainHooks& hooks) {
    config.validate();
    const auto train_section = make_section(store, split.train);
    const bool validating = config.val_every > 0 && config.val_episodes > 0 && split.val.size() >= config.way;
    ClassSection val_section;
    if (validating) val_section = make_section(store, split.val);

    Rng init_rng = Rng::substream(config.seed, Stream::init, 0);
    TrainResult result;
    result.final_params = init_params<float>(config.embedding, init_rng);
    auto& params = result.final_params;
    auto trainable = params.parameters();

    auto emit_best = [&](std::size_t episode, std::optional<double> acc) {
        result.best = to_checkpoint(params);
        result.best_episode = episode;
        result.best_val_acc = acc;
        if (hooks.on_checkpoint) hooks.on_checkpoint(result.best);
    };
    if (!validating || config.episodes_total == 0) emit_best(0, std::nullopt);

    const std::size_t log_every = config.val_every > 0 ? config.val_every : 100;
    double loss_since = 0.0;
    std::size_t count_since = 0;
    const BatchNormMode mode = config.embedding.batchnorm_mode;

    for (std::size_t e = 0; e < config.episodes_total; ++e) {
        const auto ep =
            sample_episode(train_section, config.way, config.shot, config.queries_per_class, config.seed,
                           Stream::episode, e);
        Rng aug_rng = Rng::substream(config.seed, Stream::augment, e);
        auto batch = make_episode_batch(store, ep, config.augment.enabled ? &config.augment : nullptr, &aug_rng);

        Tape<float> tape;
        auto features = embed_features(tape, params, Var<float>::constant(std::move(batch.images)),
                                       ForwardOptions{mode, mode == BatchNormMode::batch_stats});
        auto z = episode_scores(tape, features, batch.layout, config.measure, config.variant);
        const auto labels = ep.query_labels();
        auto loss = episode_loss(tape, z, labels, static_cast<float>(config.score_scale));
        const float value = loss.value().item();
        if (!std::isfinite(value)) {
            throw NumericError("non-finite loss at episode " + std::to_string(e) + "; last good checkpoint from episode " +
                               std::to_string(result.best_episode));
        }
        for (auto& p : trainable) p.zero_grad();
        tape.backward(loss);
        adam_step(trainable, result.adam, lr_at(e, config), config.adam);
        result.losses.push_back(value);
        loss_since += value;
        ++count_since;

        const std::size_t done = e + 1;
        if (done % log_every == 0 || done == config.episodes_total) {
            LogRecord rec;
            rec.episode = done;
            rec.loss = loss_since / static_cast<double>(count_since);
            rec.lr = lr_at(e, config);
            if (validating) {
                rec.val_acc = validate_model(params, store, val_section, config);
                if (!result.best_val_acc || *rec.val_acc > *result.best_val_acc) emit_best(done, rec.val_acc);
            }
            loss_since = 0.0;
            count_since = 0;
            result.log.push_back(rec);
            if (hooks.on_log) hooks.on_log(rec);
        }
    }
    if (!validating && config.episodes_total > 0) emit_best(config.episodes_total, std::nullopt);
    return result;
}

Tensor classifier_logits(EmbeddingParams<float>& params, const FcHead<float>& head, const Tensor& images) {
    Tape<float> tape(false);
    auto fmap = embed_features(tape, params, Var<float>::constant(images),
                               ForwardOptions{BatchNormMode::running_stats, false});
    return head_forward(tape, head, fmap, static_cast<float>(params.config.leaky_slope)).logits.value();
}

PretrainResult pretrain_classifier(const PretrainConfig& config, const ImageStore& store, const ClassSplit& split) {
    config.embedding.validate();
    if (config.batch_size < 2) throw ConfigError("pretrain batch_size must be >= 2");
    const auto section = make_section(store, split.train);
    std::vector<std::size_t> pool;
    std::vector<int> pool_labels;
    for (std::size_t c = 0; c < section.num_classes(); ++c) {
        for (auto idx : section.images[c]) {
            pool.push_back(idx);
            pool_labels.push_back(static_cast<int>(c));
        }
    }
    if (pool.size() < config.batch_size) {
        throw ConfigError("pretrain batch_size " + std::to_string(config.batch_size) + " exceeds the " +
                          std::to_string(pool.size()) + " training images");
    }

    Rng init_rng = Rng::substream(config.seed, Stream::init, 1);
    PretrainResult result;
    result.params = init_params<float>(config.embedding, init_rng);
    HeadConfig hc = config.head;
    hc.num_classes = section.num_classes();
    const auto dc = descriptor_count(config.embedding);
    result.head = init_head<float>(hc, dc.d * dc.m, init_rng);

    auto trainable = result.params.parameters();
    for (auto& p : result.head.parameters()) trainable.push_back(p);
    AdamState adam;
    const float slope = static_cast<float>(config.embedding.leaky_slope);

    for (std::size_t s = 0; s < config.steps; ++s) {
        Rng rng = Rng::substream(config.seed, Stream::batch, s);
        const auto pick = rng.sample_without_replacement(pool.size(), config.batch_size);
        std::vector<std::size_t> idx;
        std::vector<int> labels;
        for (auto p : pick) {
            idx.push_back(pool[p]);
            labels.push_back(pool_labels[p]);
        }
        Tape<float> tape;
        auto fmap = embed_features(tape, result.params, Var<float>::constant(store.batch(idx)),
                                   ForwardOptions{BatchNormMode::batch_stats, true});
        auto out = head_forward(tape, result.head, fmap, slope);
        auto loss = ops::cross_entropy(tape, out.logits, labels);
        const float value = loss.value().item();
        if (!std::isfinite(value)) throw NumericError("non-finite pretraining loss at step " + std::to_string(s));
        for (auto& p : trainable) p.zero_grad();
        tape.backward(loss);
        adam_step(trainable, adam, config.learning_rate, config.adam);
        result.losses.push_back(value);
    }

    std::size_t hit = 0;
    const std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < pool.size(); begin += chunk) {
        const std::size_t end = std::min(pool.size(), begin + chunk);
        std::vector<std::size_t> idx(pool.begin() + static_cast<std::ptrdiff_t>(begin),
                                     pool.begin() + static_cast<std::ptrdiff_t>(end));
        const Tensor logits = classifier_logits(result.params, result.head, store.batch(idx));
        const std::size_t c = logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j) {
                if (logits[i * c + j] > logits[i * c + best]) best = j;
            }
            hit += static_cast<int>(best) == pool_labels[begin + i] ? 1 : 0;
        }
    }
    result.train_accuracy = static_cast<double>(hit) / static_cast<double>(pool.size());
    result.checkpoint = to_checkpoint(result.params, &result.head);
    return result;
}

}  // namespace dn4
