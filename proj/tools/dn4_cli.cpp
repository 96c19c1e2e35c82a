// Command-line entry point: every pipeline stage as a subcommand.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "dn4/baselines.hpp"
#include "dn4/gradient_suite.hpp"
#include "dn4/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dn4;

namespace {

struct Common {
    std::string config_path;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::vector<std::string> overrides;
};

RunConfig resolve(const Common& common) {
    RunConfig cfg;
    if (!common.config_path.empty()) cfg.load(common.config_path);
    for (const auto& kv : common.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (common.seed) cfg.seed = *common.seed;
    if (common.threads) cfg.threads = *common.threads;
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << text;
}

fs::path prepare_out(const Common& common, const RunConfig& cfg) {
    fs::path out(common.out);
    fs::create_directories(out);
    write_text(out / "config.txt", cfg.to_text());
    return out;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

void print_report(const char* what, const EvalReport& r) {
    std::cout << what << ": " << pct(r.mean_accuracy) << "% +- " << pct(r.ci95) << "% over "
              << r.episodes_per_repeat << " x " << r.per_repeat_means.size() << " episodes\n";
}

EmbeddingParams<float> train_model(RunConfig cfg, const Workspace& ws, const fs::path& dir) {
    fs::create_directories(dir);
    cfg.embedding = fit_embedding(cfg.embedding, ws.store);
    std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
    TrainHooks hooks;
    hooks.on_log = [&log](const LogRecord& r) {
        log << r.to_json() << "\n";
        log.flush();
        std::cerr << r.to_json() << "\n";
    };
    hooks.on_checkpoint = [&dir](const Checkpoint& c) { save_checkpoint(dir / "checkpoint.dn4c", c); };
    auto result = train(cfg.resolved_train(), ws.store, ws.split, hooks);
    save_checkpoint(dir / "final.dn4c", to_checkpoint(result.final_params));
    write_text(dir / "config.txt", cfg.to_text());
    return params_from_checkpoint(result.best, cfg.embedding);
}

std::string arm_name(MeasureVariant v, std::size_t shot, std::size_t k) {
    return std::string(variant_name(v)) + "_" + std::to_string(shot) + "shot_k" + std::to_string(k);
}

int run(const std::string& name, const Common& common, const std::map<std::string, std::string>& extra) {
    RunConfig cfg = resolve(common);

    if (name == "gradcheck") {
        bool ok = true;
        for (const auto& r : run_gradient_suite(cfg.seed + 1)) {
            const bool pass = r.max_rel_error <= 1e-4;
            ok = ok && pass;
            std::printf("%-24s max_rel_error=%.3e %s\n", r.op.c_str(), r.max_rel_error, pass ? "ok" : "FAIL");
        }
        return ok ? 0 : 1;
    }

    const fs::path out = prepare_out(common, cfg);

    if (name == "synth") {
        SyntheticConfig sc = cfg.synth;
        sc.seed = cfg.seed;
        const auto m = make_synthetic_dataset(out, sc);
        std::cout << "wrote " << m.entries.size() << " images of " << m.by_class.size() << " classes to " << out.string()
                  << "\n";
        return 0;
    }
    if (name == "convert") {
        std::optional<std::pair<std::size_t, std::size_t>> size;
        if (const auto& s = extra.at("resize"); !s.empty()) {
            const auto x = s.find('x');
            if (x == std::string::npos) throw ConfigError("--resize expects HxW, got '" + s + "'");
            size = std::make_pair(std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1)));
        }
        const fs::path dest = out / extra.at("output");
        if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
        const auto t = convert_ppm(extra.at("input"), dest, size);
        std::cout << "wrote " << dest.string() << " " << shape_string(t.shape()) << "\n";
        return 0;
    }
    if (name == "split") {
        const auto manifest = load_manifest(cfg.manifest_path());
        const auto split = make_split(manifest, cfg.train_classes, cfg.val_classes, cfg.test_classes, cfg.seed);
        save_split(out / "split.txt", split);
        std::cout << "train " << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size()
                  << " classes -> " << (out / "split.txt").string() << "\n";
        return 0;
    }

    const Workspace ws = open_workspace(cfg);
    cfg.embedding = fit_embedding(cfg.embedding, ws.store);
    const auto test = ws.section("test");
    const EvalSettings settings = cfg.resolved_eval();

    if (name == "pretrain") {
        auto result = pretrain_classifier(cfg.resolved_pretrain(), ws.store, ws.split);
        save_checkpoint(out / "pretrained.dn4c", result.checkpoint);
        std::ofstream log(out / "pretrain_log.jsonl", std::ios::binary);
        for (std::size_t i = 0; i < result.losses.size(); ++i) {
            if ((i + 1) % 50 == 0 || i + 1 == result.losses.size()) {
                nlohmann::ordered_json j{{"step", i + 1}, {"loss", result.losses[i]}};
                log << j.dump() << "\n";
            }
        }
        std::cout << "pretrained on " << ws.split.train.size() << " classes, training accuracy "
                  << pct(result.train_accuracy) << "%\n";
        return 0;
    }
    if (name == "train") {
        train_model(cfg, ws, out);
        std::cout << "checkpoint " << (out / "checkpoint.dn4c").string() << "\n";
        return 0;
    }
    if (name == "eval") {
        if (cfg.checkpoint.empty()) throw ConfigError("eval requires --set checkpoint=<path>");
        auto params = load_model(cfg.checkpoint, cfg.embedding);
        auto report = evaluate(measure_predictor(params, ws.store, cfg.measure, cfg.train.variant,
                                                 cfg.embedding.batchnorm_mode),
                               test, settings);
        report.config["model"] = variant_name(cfg.train.variant);
        report.config["checkpoint"] = cfg.checkpoint;
        report.config["k_neighbors"] = std::to_string(cfg.measure.k_neighbors);
        write_text(out / "eval_report.json", report.to_json());
        print_report(variant_name(cfg.train.variant), report);
        return 0;
    }
    if (name == "nbnn" || name == "knn-baseline") {
        if (cfg.pretrained_checkpoint.empty()) {
            throw ConfigError(name + " requires --set pretrained_checkpoint=<path>");
        }
        std::optional<FcHead<float>> head;
        auto params = load_model(cfg.pretrained_checkpoint, cfg.embedding, &head);
        EvalReport report;
        if (name == "nbnn") {
            report = evaluate(nbnn_predictor(params, ws.store, cfg.measure), test, settings);
            report.config["k_neighbors"] = std::to_string(cfg.measure.k_neighbors);
        } else {
            if (!head) throw ConfigError("checkpoint has no fc head: " + cfg.pretrained_checkpoint);
            report = evaluate(knn_predictor(params, *head, ws.store, cfg.knn_k), test, settings);
            report.config["knn_k"] = std::to_string(cfg.knn_k);
        }
        report.config["model"] = name;
        report.config["checkpoint"] = cfg.pretrained_checkpoint;
        write_text(out / (name == "nbnn" ? "nbnn_report.json" : "knn_report.json"), report.to_json());
        print_report(name.c_str(), report);
        return 0;
    }
    if (name == "ablate") {
        std::map<MeasureVariant, std::map<std::size_t, EmbeddingParams<float>>> models;
        std::map<MeasureVariant, std::map<std::size_t, EmbeddingParams<float>*>> ptrs;
        for (auto v : {MeasureVariant::dn4, MeasureVariant::ioi1, MeasureVariant::ioi2}) {
            for (auto s : cfg.ablation_shots) {
                RunConfig arm = cfg;
                arm.train.variant = v;
                arm.train.shot = s;
                models[v].emplace(s, train_model(arm, ws, out / "arms" / arm_name(v, s, cfg.measure.k_neighbors)));
            }
        }
        for (auto& [v, m] : models) {
            for (auto& [s, p] : m) ptrs[v][s] = &p;
        }
        auto result = run_ablation(ptrs, ws.store, test, cfg.measure, settings);
        write_text(out / "ablation.csv", result.table.to_csv());
        std::cout << result.table.to_csv() << "identical episode streams: " << (result.streams_identical ? "yes" : "no")
                  << "\n";
        return 0;
    }
    if (name == "k-study") {
        std::map<std::size_t, EmbeddingParams<float>> models;
        std::map<std::size_t, EmbeddingParams<float>*> ptrs;
        for (auto k : cfg.k_values) {
            RunConfig arm = cfg;
            arm.measure.k_neighbors = k;
            models.emplace(k, train_model(arm, ws, out / "arms" / arm_name(MeasureVariant::dn4, cfg.train.shot, k)));
        }
        for (auto& [k, p] : models) ptrs[k] = &p;
        auto result = run_k_study(ptrs, ws.store, test, cfg.measure, settings);
        write_text(out / "k_study.csv", result.table.to_csv());
        std::cout << result.table.to_csv() << "spread " << pct(result.spread) << " points\n";
        return 0;
    }
    if (name == "shot-study") {
        std::map<std::size_t, EmbeddingParams<float>> models;
        std::map<std::size_t, EmbeddingParams<float>*> ptrs;
        for (auto s : cfg.shots) {
            RunConfig arm = cfg;
            arm.train.shot = s;
            models.emplace(s, train_model(arm, ws, out / "arms" / arm_name(MeasureVariant::dn4, s, cfg.measure.k_neighbors)));
        }
        for (auto& [s, p] : models) ptrs[s] = &p;
        auto result = run_shot_study(ptrs, ws.store, test, cfg.measure, settings);
        write_text(out / "shot_study.csv", result.table.to_csv());
        nlohmann::ordered_json j{{"lower", result.lower}, {"diagonal", result.diagonal}, {"upper", result.upper}};
        write_text(out / "shot_study.json", j.dump(2) + "\n");
        std::cout << result.table.to_csv() << "lower " << pct(result.lower) << ", diagonal " << pct(result.diagonal)
                  << ", upper " << pct(result.upper) << "\n";
        return 0;
    }
    if (name == "export-sim") {
        if (cfg.checkpoint.empty()) throw ConfigError("export-sim requires --set checkpoint=<path>");
        auto params = load_model(cfg.checkpoint, cfg.embedding);
        const auto ep = sample_episode(test, settings.way, settings.shot, settings.queries_per_class, settings.seed,
                                       Stream::eval, 0);
        auto sim = export_similarity_matrix(params, ws.store, ep, cfg.measure, cfg.embedding.batchnorm_mode,
                                            out / "similarity.csv");
        std::cout << "wrote " << (out / "similarity.csv").string() << " " << shape_string(sim.matrix.shape()) << "\n";
        return 0;
    }
    throw ConfigError("unhandled subcommand " + name);
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Local-descriptor few-shot classification pipeline"};
    app.require_subcommand(1);
    Common common;
    std::map<std::string, std::string> extra{{"input", ""}, {"output", ""}, {"resize", ""}};

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Config file of 'key = value' lines");
        sub->add_option("--out", common.out, "Output directory")->capture_default_str();
        sub->add_option("--seed", common.seed, "Seed for every random stream");
        sub->add_option("--threads", common.threads, "Evaluation worker threads (results do not depend on it)");
        sub->add_option("--set", common.overrides, "Override one config key (key=value), repeatable");
    };

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"synth", "Render the synthetic texture dataset"},
        {"convert", "Convert a binary PPM image into a tensor file"},
        {"split", "Partition the manifest's classes into train/val/test"},
        {"pretrain", "Train the classification network with an FC head"},
        {"train", "Episodic training through the image-to-class measure"},
        {"eval", "Evaluate a trained checkpoint on test episodes"},
        {"nbnn", "Naive-Bayes nearest neighbor on frozen local descriptors"},
        {"knn-baseline", "Cosine k-NN on image-level features"},
        {"ablate", "Train and compare the image-to-class and image-to-image measures"},
        {"k-study", "Train and evaluate one model per neighbor count"},
        {"shot-study", "Cross-evaluate models trained with different shot counts"},
        {"export-sim", "Write one episode's class-by-query score matrix"},
        {"gradcheck", "Finite-difference check of every differentiable op"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub);
        if (name == "convert") {
            sub->add_option("--input", extra["input"], "Input .ppm")->required();
            sub->add_option("--output", extra["output"], "Output .dn4t, relative to --out")->required();
            sub->add_option("--resize", extra["resize"], "Target size as HxW");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        return run(name, common, extra);
    } catch (const std::exception& e) {
        std::string reason = e.what();
        for (auto& c : reason) {
            if (c == '\n') c = ' ';
        }
        std::cerr << "error: " << reason << "\n";
        return 1;
    }
}
