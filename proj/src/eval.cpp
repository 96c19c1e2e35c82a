#include "dn4/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dn4/baselines.hpp"
#include "dn4/trainer.hpp"

namespace dn4 {

namespace {

std::string format_double(double v, int digits = 9) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

std::string format_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["mean_accuracy"] = mean_accuracy;
    j["ci95"] = ci95;
    j["per_repeat_means"] = per_repeat_means;
    j["episodes_per_repeat"] = episodes_per_repeat;
    j["seed"] = seed;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(episode_stream_hash));
    j["episode_stream_hash"] = hash;
    j["config"] = config;
    return j.dump(2) + "\n";
}

EvalReport evaluate(const EpisodePredictor& predictor, const ClassSection& section, const EvalSettings& settings) {
    if (settings.episodes < 1 || settings.repeats < 1) throw ConfigError("evaluate: episodes and repeats must be >= 1");
    const std::size_t total = settings.episodes * settings.repeats;
    std::vector<Episode> episodes(total);
    for (std::size_t i = 0; i < total; ++i) {
        episodes[i] = sample_episode(section, settings.way, settings.shot, settings.queries_per_class, settings.seed,
                                     Stream::eval, i);
    }

    std::vector<double> acc(total);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < total; i += stride) {
            const auto pred = predictor(episodes[i]);
            acc[i] = episode_accuracy(pred, episodes[i].query_labels());
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(settings.threads, total));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    work(t, threads);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    EvalReport report;
    report.episodes_per_repeat = settings.episodes;
    report.seed = settings.seed;
    report.episode_accuracies = acc;
    std::uint64_t h = 0;
    for (const auto& ep : episodes) h = Rng::mix(h ^ ep.hash());
    report.episode_stream_hash = h;

    double grand = 0.0;
    for (std::size_t r = 0; r < settings.repeats; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < settings.episodes; ++i) s += acc[r * settings.episodes + i];
        report.per_repeat_means.push_back(s / static_cast<double>(settings.episodes));
        grand += report.per_repeat_means.back();
    }
    report.mean_accuracy = grand / static_cast<double>(settings.repeats);

    double overall = 0.0;
    for (double a : acc) overall += a;
    overall /= static_cast<double>(total);
    double ss = 0.0;
    for (double a : acc) ss += (a - overall) * (a - overall);
    const double sd = total > 1 ? std::sqrt(ss / static_cast<double>(total - 1)) : 0.0;
    report.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(total));

    report.config = {{"way", std::to_string(settings.way)},
                     {"shot", std::to_string(settings.shot)},
                     {"queries_per_class", std::to_string(settings.queries_per_class)},
                     {"episodes", std::to_string(settings.episodes)},
                     {"repeats", std::to_string(settings.repeats)},
                     {"seed", std::to_string(settings.seed)}};
    return report;
}

EpisodePredictor measure_predictor(EmbeddingParams<float>& params, const ImageStore& store,
                                   const MeasureConfig& measure, MeasureVariant variant, BatchNormMode mode) {
    return [&params, &store, measure, variant, mode](const Episode& ep) {
        return predict_episode(params, store, ep, measure, variant, mode);
    };
}

EpisodePredictor nbnn_predictor(EmbeddingParams<float>& frozen, const ImageStore& store, const MeasureConfig& measure) {
    return [&frozen, &store, measure](const Episode& ep) { return nbnn_classify(frozen, store, ep, measure); };
}

EpisodePredictor knn_predictor(EmbeddingParams<float>& frozen, const FcHead<float>& head, const ImageStore& store,
                               std::size_t k) {
    return [&frozen, &head, &store, k](const Episode& ep) { return global_knn_episode(frozen, head, store, ep, k); };
}

EpisodePredictor constant_predictor() {
    return [](const Episode& ep) { return std::vector<int>(ep.queries.size(), 0); };
}

EpisodePredictor chance_predictor(std::uint64_t seed) {
    return [seed](const Episode& ep) {
        Rng rng(Rng::mix(seed ^ ep.hash()));
        std::vector<int> out(ep.queries.size());
        for (auto& o : out) o = static_cast<int>(rng.below(ep.way));
        return out;
    };
}

EpisodePredictor oracle_predictor() {
    return [](const Episode& ep) { return ep.query_labels(); };
}

std::string StudyTable::to_csv() const {
    std::ostringstream os;
    auto line = [&os](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
        os << "\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
}

AblationResult run_ablation(std::map<MeasureVariant, std::map<std::size_t, EmbeddingParams<float>*>> models,
                            const ImageStore& store, const ClassSection& section, const MeasureConfig& measure,
                            EvalSettings settings) {
    AblationResult out;
    std::map<std::size_t, std::uint64_t> stream;
    std::vector<std::size_t> shots;
    for (const auto& [variant, per_shot] : models) {
        for (const auto& [shot, params] : per_shot) {
            if (params == nullptr) {
                throw ConfigError(std::string("ablation: missing checkpoint for ") + variant_name(variant) + " " +
                                  std::to_string(shot) + "-shot");
            }
            settings.shot = shot;
            auto rep = evaluate(measure_predictor(*params, store, measure, variant, params->config.batchnorm_mode),
                                section, settings);
            rep.config["variant"] = variant_name(variant);
            auto [it, fresh] = stream.try_emplace(shot, rep.episode_stream_hash);
            if (!fresh && it->second != rep.episode_stream_hash) out.streams_identical = false;
            if (std::find(shots.begin(), shots.end(), shot) == shots.end()) shots.push_back(shot);
            out.reports[variant][shot] = std::move(rep);
        }
    }
    std::sort(shots.begin(), shots.end());
    out.table.header = {"model"};
    for (auto s : shots) out.table.header.push_back(std::to_string(s) + "-shot");
    for (const auto& [variant, per_shot] : out.reports) {
        std::vector<std::string> row{variant_name(variant)};
        for (auto s : shots) {
            auto it = per_shot.find(s);
            row.push_back(it == per_shot.end() ? "" : format_pct(it->second.mean_accuracy));
        }
        out.table.rows.push_back(std::move(row));
    }
    return out;
}

KStudyResult run_k_study(std::map<std::size_t, EmbeddingParams<float>*> models, const ImageStore& store,
                         const ClassSection& section, const MeasureConfig& measure, EvalSettings settings) {
    KStudyResult out;
    out.table.header = {"k", "accuracy", "ci95"};
    double lo = 1.0, hi = 0.0;
    for (const auto& [k, params] : models) {
        if (params == nullptr) throw ConfigError("k-study: missing checkpoint for k=" + std::to_string(k));
        MeasureConfig m = measure;
        m.k_neighbors = k;
        auto rep = evaluate(measure_predictor(*params, store, m, MeasureVariant::dn4, params->config.batchnorm_mode),
                            section, settings);
        rep.config["k_neighbors"] = std::to_string(k);
        lo = std::min(lo, rep.mean_accuracy);
        hi = std::max(hi, rep.mean_accuracy);
        out.table.rows.push_back({std::to_string(k), format_pct(rep.mean_accuracy), format_pct(rep.ci95)});
        out.reports[k] = std::move(rep);
    }
    out.spread = models.empty() ? 0.0 : hi - lo;
    return out;
}

bool ShotStudyResult::ordering_holds(double min_gap) const {
    return lower >= diagonal && diagonal >= upper && lower - upper >= min_gap;
}

ShotStudyResult run_shot_study(std::map<std::size_t, EmbeddingParams<float>*> models, const ImageStore& store,
                               const ClassSection& section, const MeasureConfig& measure, EvalSettings settings) {
    ShotStudyResult out;
    for (const auto& [s, params] : models) {
        if (params == nullptr) throw ConfigError("shot-study: missing checkpoint for " + std::to_string(s) + "-shot");
        out.shots.push_back(s);
    }
    const std::size_t n = out.shots.size();
    out.accuracy.assign(n, std::vector<double>(n, 0.0));
    double sl = 0, sd = 0, su = 0;
    std::size_t nl = 0, nd = 0, nu = 0;
    out.table.header = {"train_shot"};
    for (auto s : out.shots) out.table.header.push_back("test_" + std::to_string(s));
    for (std::size_t i = 0; i < n; ++i) {
        auto* params = models.at(out.shots[i]);
        std::vector<std::string> row{std::to_string(out.shots[i])};
        for (std::size_t j = 0; j < n; ++j) {
            settings.shot = out.shots[j];
            const double a =
                evaluate(measure_predictor(*params, store, measure, MeasureVariant::dn4, params->config.batchnorm_mode),
                         section, settings)
                    .mean_accuracy;
            out.accuracy[i][j] = a;
            row.push_back(format_pct(a));
            if (i > j) {
                sl += a;
                ++nl;
            } else if (i == j) {
                sd += a;
                ++nd;
            } else {
                su += a;
                ++nu;
            }
        }
        out.table.rows.push_back(std::move(row));
    }
    out.lower = nl ? sl / static_cast<double>(nl) : 0.0;
    out.diagonal = nd ? sd / static_cast<double>(nd) : 0.0;
    out.upper = nu ? su / static_cast<double>(nu) : 0.0;
    return out;
}

SimilarityExport export_similarity_matrix(EmbeddingParams<float>& params, const ImageStore& store,
                                          const Episode& episode, const MeasureConfig& measure, BatchNormMode mode,
                                          const std::filesystem::path& csv_path) {
    const Tensor z = score_episode(params, store, episode, measure, MeasureVariant::dn4, mode);  // [Q, C]
    const std::size_t q = z.dim(0), c = z.dim(1);
    SimilarityExport out;
    out.episode = episode;
    out.matrix = Tensor(Shape{c, q});
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.matrix[j * q + i] = z[i * c + j];
    }

    std::ofstream csv(csv_path);
    if (!csv) throw IngestionError("cannot write " + csv_path.string());
    for (std::size_t i = 0; i < q; ++i) csv << (i ? "," : "") << "q" << i;
    csv << "\n";
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < q; ++i) csv << (i ? "," : "") << format_double(out.matrix[j * q + i]);
        csv << "\n";
    }

    nlohmann::ordered_json side;
    side["rows"] = "episode classes";
    side["columns"] = "queries in episode order";
    side["way"] = episode.way;
    side["shot"] = episode.shot;
    side["queries_per_class"] = episode.queries_per_class;
    side["k_neighbors"] = measure.k_neighbors;
    side["section_classes"] = episode.classes;
    std::vector<std::size_t> simg, qimg;
    for (const auto& s : episode.support) simg.push_back(s.image);
    for (const auto& s : episode.queries) qimg.push_back(s.image);
    side["support_images"] = simg;
    side["query_images"] = qimg;
    side["query_labels"] = episode.query_labels();
    auto json_path = csv_path;
    json_path.replace_extension(".json");
    std::ofstream js(json_path);
    if (!js) throw IngestionError("cannot write " + json_path.string());
    js << side.dump(2) << "\n";
    return out;
}

Tensor read_similarity_csv(const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw IngestionError("cannot read " + csv_path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(csv_path.string() + ": empty similarity CSV");
    const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    std::vector<float> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stof(cell));
            ++n;
        }
        if (n != cols) throw FormatError(csv_path.string() + ": ragged row " + std::to_string(rows + 1));
        ++rows;
    }
    if (rows == 0) throw FormatError(csv_path.string() + ": no data rows");
    return Tensor(Shape{rows, cols}, std::move(values));
}

}  // namespace dn4
