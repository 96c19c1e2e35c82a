#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dn4/episode.hpp"
#include "dn4/measure.hpp"

namespace dn4 {

/// Maps an episode to one predicted label per query, in query order.
using EpisodePredictor = std::function<std::vector<int>(const Episode&)>;

struct EvalSettings {
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries_per_class = 15;
    std::size_t episodes = 600;
    std::size_t repeats = 5;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct EvalReport {
    double mean_accuracy = 0.0;
    double ci95 = 0.0;
    std::vector<double> per_repeat_means;
    std::size_t episodes_per_repeat = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> config;  // echo of the settings and model
    std::uint64_t episode_stream_hash = 0;      // digest of every sampled episode
    std::vector<double> episode_accuracies;     // not serialized

    std::string to_json() const;
};

/// Episode r*episodes + i of the eval stream is repeat r, episode i. Results
/// are aggregated in index order, so the report does not depend on threads.
EvalReport evaluate(const EpisodePredictor& predictor, const ClassSection& section, const EvalSettings& settings);

// ---- predictors ----

EpisodePredictor measure_predictor(EmbeddingParams<float>& params, const ImageStore& store,
                                   const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode);
EpisodePredictor nbnn_predictor(EmbeddingParams<float>& frozen, const ImageStore& store, const MeasureConfig& measure);
EpisodePredictor knn_predictor(EmbeddingParams<float>& frozen, const FcHead<float>& head, const ImageStore& store,
                               std::size_t k);
/// Always predicts label 0.
EpisodePredictor constant_predictor();
/// Uniform random labels, a pure function of seed and episode.
EpisodePredictor chance_predictor(std::uint64_t seed);
EpisodePredictor oracle_predictor();

// ---- studies ----

struct StudyTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string to_csv() const;
};

struct AblationResult {
    /// accuracy[variant][shot]
    std::map<MeasureVariant, std::map<std::size_t, EvalReport>> reports;
    StudyTable table;
    bool streams_identical = true;
};

/// models[variant][shot]: each variant trained with its own measure.
AblationResult run_ablation(std::map<MeasureVariant, std::map<std::size_t, EmbeddingParams<float>*>> models,
                            const ImageStore& store, const ClassSection& section, const MeasureConfig& measure,
                            EvalSettings settings);

struct KStudyResult {
    std::map<std::size_t, EvalReport> reports;
    StudyTable table;
    double spread = 0.0;  // max - min mean accuracy
};

/// models[k] trained with k neighbors; each is evaluated with the same k.
KStudyResult run_k_study(std::map<std::size_t, EmbeddingParams<float>*> models, const ImageStore& store,
                         const ClassSection& section, const MeasureConfig& measure, EvalSettings settings);

struct ShotStudyResult {
    std::vector<std::size_t> shots;
    std::vector<std::vector<double>> accuracy;  // [train shot][test shot]
    double lower = 0.0;                         // train shot > test shot
    double diagonal = 0.0;
    double upper = 0.0;                         // train shot < test shot
    StudyTable table;

    /// lower >= diagonal >= upper and lower - upper >= min_gap
    bool ordering_holds(double min_gap) const;
};

/// Shot values come from the keys of `models` (models[train_shot]).
ShotStudyResult run_shot_study(std::map<std::size_t, EmbeddingParams<float>*> models, const ImageStore& store,
                               const ClassSection& section, const MeasureConfig& measure, EvalSettings settings);

struct SimilarityExport {
    Tensor matrix;  // [way, way * queries_per_class], query order column-wise
    Episode episode;
};

/// Writes `<stem>.csv` (header row q0..qN, one row per class) and
/// `<stem>.json` (episode classes, images and labels).
SimilarityExport export_similarity_matrix(EmbeddingParams<float>& params, const ImageStore& store,
                                          const Episode& episode, const MeasureConfig& measure, BatchNormMode mode,
                                          const std::filesystem::path& csv_path);

/// Parses a matrix written by export_similarity_matrix.
Tensor read_similarity_csv(const std::filesystem::path& csv_path);

}  // namespace dn4
