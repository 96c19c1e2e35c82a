#include "dn4/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace dn4 {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::string format(std::size_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}
std::string format(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}
std::string format(MeasureVariant v) { return variant_name(v); }
std::string format(BatchNormMode m) { return m == BatchNormMode::batch_stats ? "batch" : "running"; }

void parse_into(std::size_t& out, const std::string& v, const std::string& key) {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
}
void parse_into(double& out, const std::string& v, const std::string& key) {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
}
void parse_into(bool& out, const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") {
        out = true;
    } else if (v == "false" || v == "0" || v == "no") {
        out = false;
    } else {
        bad_value(key, v, "true or false");
    }
}
void parse_into(std::string& out, const std::string& v, const std::string&) { out = v; }
void parse_into(std::vector<std::size_t>& out, const std::string& v, const std::string& key) {
    std::vector<std::size_t> parsed;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t x = 0;
        parse_into(x, trim(item), key);
        parsed.push_back(x);
    }
    if (parsed.empty()) bad_value(key, v, "a comma-separated list of integers");
    out = std::move(parsed);
}
void parse_into(MeasureVariant& out, const std::string& v, const std::string& key) {
    try {
        out = parse_variant(v);
    } catch (const Error&) {
        bad_value(key, v, "dn4, ioi1 or ioi2");
    }
}
void parse_into(BatchNormMode& out, const std::string& v, const std::string& key) {
    if (v == "batch") {
        out = BatchNormMode::batch_stats;
    } else if (v == "running") {
        out = BatchNormMode::running_stats;
    } else {
        bad_value(key, v, "batch or running");
    }
}

struct Entry {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <class Ref>
Entry field(std::string key, Ref ref) {
    return {key, [ref](const RunConfig& c) { return format(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, const std::string& v) { parse_into(ref(c), v, key); }};
}

#define DN4_FIELD(key, expr) field(key, [](RunConfig& c) -> auto& { return c.expr; })

const std::vector<Entry>& table() {
    static const std::vector<Entry> entries = {
        DN4_FIELD("seed", seed),
        DN4_FIELD("threads", threads),
        DN4_FIELD("data_dir", data_dir),
        DN4_FIELD("manifest", manifest),
        DN4_FIELD("split", split),
        DN4_FIELD("train_classes", train_classes),
        DN4_FIELD("val_classes", val_classes),
        DN4_FIELD("test_classes", test_classes),
        DN4_FIELD("num_classes", synth.num_classes),
        DN4_FIELD("images_per_class", synth.images_per_class),
        DN4_FIELD("image_size", synth.size),
        DN4_FIELD("motifs_per_class", synth.motifs_per_class),
        DN4_FIELD("motifs_per_image", synth.motifs_per_image),
        DN4_FIELD("patches_per_image", synth.patches_per_image),
        DN4_FIELD("noise", synth.noise),
        DN4_FIELD("filters", embedding.filters_per_layer),
        DN4_FIELD("leaky_slope", embedding.leaky_slope),
        DN4_FIELD("bn_mode", embedding.batchnorm_mode),
        DN4_FIELD("bn_eps", embedding.bn_eps),
        DN4_FIELD("k_neighbors", measure.k_neighbors),
        DN4_FIELD("zero_norm_eps", measure.zero_norm_eps),
        DN4_FIELD("variant", train.variant),
        DN4_FIELD("way", train.way),
        DN4_FIELD("shot", train.shot),
        DN4_FIELD("queries_per_class", train.queries_per_class),
        DN4_FIELD("episodes_total", train.episodes_total),
        DN4_FIELD("learning_rate", train.learning_rate),
        DN4_FIELD("lr_halve_every", train.lr_halve_every),
        DN4_FIELD("adam_beta1", train.adam.beta1),
        DN4_FIELD("adam_beta2", train.adam.beta2),
        DN4_FIELD("adam_eps", train.adam.eps),
        DN4_FIELD("score_scale", train.score_scale),
        DN4_FIELD("val_every", train.val_every),
        DN4_FIELD("val_episodes", train.val_episodes),
        DN4_FIELD("val_queries_per_class", train.val_queries_per_class),
        DN4_FIELD("augment", train.augment.enabled),
        DN4_FIELD("crop_padding", train.augment.crop_padding),
        DN4_FIELD("flip_probability", train.augment.flip_probability),
        DN4_FIELD("pretrain_steps", pretrain.steps),
        DN4_FIELD("pretrain_batch", pretrain.batch_size),
        DN4_FIELD("pretrain_lr", pretrain.learning_rate),
        DN4_FIELD("fc_hidden1", pretrain.head.hidden1),
        DN4_FIELD("fc_hidden2", pretrain.head.hidden2),
        DN4_FIELD("eval_way", eval.way),
        DN4_FIELD("eval_shot", eval.shot),
        DN4_FIELD("eval_queries_per_class", eval.queries_per_class),
        DN4_FIELD("eval_episodes", eval.episodes),
        DN4_FIELD("eval_repeats", eval.repeats),
        DN4_FIELD("knn_k", knn_k),
        DN4_FIELD("checkpoint", checkpoint),
        DN4_FIELD("pretrained_checkpoint", pretrained_checkpoint),
        DN4_FIELD("k_values", k_values),
        DN4_FIELD("shots", shots),
        DN4_FIELD("ablation_shots", ablation_shots),
    };
    return entries;
}

#undef DN4_FIELD

const Entry& lookup(const std::string& key) {
    for (const auto& e : table()) {
        if (e.key == key) return e;
    }
    throw ConfigError("unknown config key: " + key);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { lookup(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return lookup(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& e : table()) out.push_back(e.key);
        return out;
    }();
    return names;
}

void RunConfig::parse(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            set(trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    parse(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& e : table()) out += e.key + " = " + e.get(*this) + "\n";
    return out;
}

std::filesystem::path RunConfig::manifest_path() const {
    return manifest.empty() ? std::filesystem::path(data_dir) / "manifest.tsv" : std::filesystem::path(manifest);
}

std::filesystem::path RunConfig::split_path() const {
    return split.empty() ? std::filesystem::path(data_dir) / "split.txt" : std::filesystem::path(split);
}

TrainConfig RunConfig::resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.measure = measure;
    t.embedding = embedding;
    return t;
}

PretrainConfig RunConfig::resolved_pretrain() const {
    PretrainConfig p = pretrain;
    p.seed = seed;
    p.adam = train.adam;
    p.embedding = embedding;
    return p;
}

EvalSettings RunConfig::resolved_eval() const {
    EvalSettings e = eval;
    e.seed = seed;
    e.threads = threads;
    return e;
}

}  // namespace dn4
