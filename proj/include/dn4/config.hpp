#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dn4/dataset.hpp"
#include "dn4/eval.hpp"
#include "dn4/trainer.hpp"

namespace dn4 {

/// Every tunable of the pipeline, addressable as a flat "key = value" text.
struct RunConfig {
    // data
    std::string data_dir = "data";
    std::string manifest;  // default <data_dir>/manifest.tsv
    std::string split;     // default <data_dir>/split.txt
    std::size_t train_classes = 30;
    std::size_t val_classes = 5;
    std::size_t test_classes = 10;
    SyntheticConfig synth;

    // model and measure
    EmbeddingConfig embedding;
    MeasureConfig measure;

    // training
    TrainConfig train;
    PretrainConfig pretrain;

    // evaluation
    EvalSettings eval;
    std::size_t knn_k = 1;
    std::string checkpoint;             // episodically trained model
    std::string pretrained_checkpoint;  // classifier-pretrained model with FC head

    // studies
    std::vector<std::size_t> k_values{1, 3, 5, 7};
    std::vector<std::size_t> shots{1, 2, 3, 4, 5};
    std::vector<std::size_t> ablation_shots{1, 5};

    std::uint64_t seed = 0;
    std::size_t threads = 1;

    /// Sets one key; unknown keys and malformed values raise ConfigError.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();

    /// "key = value" lines; '#' starts a comment.
    void parse(const std::string& text, const std::string& origin = "config");
    void load(const std::filesystem::path& path);
    /// Every key with its resolved value, in a stable order.
    std::string to_text() const;

    std::filesystem::path manifest_path() const;
    std::filesystem::path split_path() const;

    /// Copies the shared fields (seed, measure, embedding) into the
    /// per-module configs before use.
    TrainConfig resolved_train() const;
    PretrainConfig resolved_pretrain() const;
    EvalSettings resolved_eval() const;
};

}  // namespace dn4
