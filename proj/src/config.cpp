#include "supattn/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace supattn {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace

nlohmann::ordered_json to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["variant"] = std::string(to_string(c.variant));
    j["word_dim"] = c.word_dim;
    j["char_dim"] = c.char_dim;
    j["char_filters"] = c.char_filters;
    j["char_width"] = c.char_width;
    j["hidden"] = c.hidden;
    j["modeling_layers"] = c.modeling_layers;
    j["early_layers"] = c.early_layers;
    j["late_layers"] = c.late_layers;
    j["heads"] = c.heads;
    j["d_model"] = c.d_model;
    j["dropout"] = c.dropout;
    j["position_signal"] = c.position_signal;
    j["supervision"] = nlohmann::ordered_json::array();
    for (const auto& a : c.supervision) {
        j["supervision"].push_back({{"kind", std::string(to_string(a.kind))},
                                    {"location", std::string(to_string(a.location))},
                                    {"layer", a.layer},
                                    {"head", a.head}});
    }
    j["lambda"] = c.lambda;
    j["weight_by_targets"] = c.weight_by_targets;
    if (c.contextual_hook) {
        j["contextual_hook"] = {{"source", c.contextual_hook->source},
                                {"dim", c.contextual_hook->dim},
                                {"dropout", c.contextual_hook->dropout}};
    } else {
        j["contextual_hook"] = nullptr;
    }
    j["word_vocab"] = c.word_vocab;
    j["char_vocab"] = c.char_vocab;
    return j;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["schedule"] = std::string(to_string(c.schedule));
    j["learning_rate"] = c.learning_rate;
    j["warmup"] = c.warmup;
    j["lr_scale"] = c.lr_scale;
    j["ema_decay"] = c.ema_decay;
    j["clip_norm"] = c.clip_norm;
    j["patience"] = c.patience;
    j["min_count"] = c.min_count;
    j["eval_batch_size"] = c.eval_batch_size;
    return j;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["model"] = to_json(c.model);
    j["train"] = to_json(c.train);
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    reject_unknown(j,
                   {"variant", "word_dim", "char_dim", "char_filters", "char_width", "hidden", "modeling_layers",
                    "early_layers", "late_layers", "heads", "d_model", "dropout", "position_signal", "supervision",
                    "lambda", "weight_by_targets", "contextual_hook", "word_vocab", "char_vocab"},
                   "model config");
    ModelConfig c;
    if (j.contains("variant")) {
        auto v = parse_variant(j.at("variant").get<std::string>());
        if (!v) throw std::invalid_argument("unknown variant '" + j.at("variant").get<std::string>() + "'");
        c.variant = *v;
    }
    read(j, "word_dim", c.word_dim);
    read(j, "char_dim", c.char_dim);
    read(j, "char_filters", c.char_filters);
    read(j, "char_width", c.char_width);
    read(j, "hidden", c.hidden);
    read(j, "modeling_layers", c.modeling_layers);
    read(j, "early_layers", c.early_layers);
    read(j, "late_layers", c.late_layers);
    read(j, "heads", c.heads);
    read(j, "d_model", c.d_model);
    read(j, "dropout", c.dropout);
    read(j, "position_signal", c.position_signal);
    read(j, "lambda", c.lambda);
    read(j, "weight_by_targets", c.weight_by_targets);
    read(j, "word_vocab", c.word_vocab);
    read(j, "char_vocab", c.char_vocab);
    if (j.contains("supervision")) {
        for (const auto& s : j.at("supervision")) {
            if (s.is_string()) {
                auto kind = parse_supervision_kind(s.get<std::string>());
                if (!kind) throw std::invalid_argument("unknown supervision kind '" + s.get<std::string>() + "'");
                c.supervision.push_back(default_assignment(c, *kind));
                continue;
            }
            reject_unknown(s, {"kind", "location", "layer", "head"}, "supervision entry");
            auto kind = parse_supervision_kind(s.at("kind").get<std::string>());
            if (!kind) throw std::invalid_argument("unknown supervision kind '" + s.at("kind").get<std::string>() + "'");
            SupervisionAssignment a = default_assignment(c, *kind);
            if (s.contains("location")) {
                auto loc = parse_location(s.at("location").get<std::string>());
                if (!loc) throw std::invalid_argument("unknown encoder location '" + s.at("location").get<std::string>() + "'");
                a.location = *loc;
            }
            read(s, "layer", a.layer);
            read(s, "head", a.head);
            c.supervision.push_back(a);
        }
    }
    if (j.contains("contextual_hook") && !j.at("contextual_hook").is_null()) {
        const auto& h = j.at("contextual_hook");
        reject_unknown(h, {"source", "dim", "dropout"}, "contextual_hook");
        ContextualHookConfig hook;
        read(h, "source", hook.source);
        read(h, "dim", hook.dim);
        read(h, "dropout", hook.dropout);
        c.contextual_hook = hook;
    }
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown(j,
                   {"epochs", "batch_size", "schedule", "learning_rate", "warmup", "lr_scale", "ema_decay", "clip_norm",
                    "patience", "min_count", "eval_batch_size"},
                   "train config");
    TrainConfig c;
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    if (j.contains("schedule")) {
        auto s = parse_schedule(j.at("schedule").get<std::string>());
        if (!s) throw std::invalid_argument("unknown schedule '" + j.at("schedule").get<std::string>() + "'");
        c.schedule = *s;
    }
    read(j, "learning_rate", c.learning_rate);
    read(j, "warmup", c.warmup);
    read(j, "lr_scale", c.lr_scale);
    read(j, "ema_decay", c.ema_decay);
    read(j, "clip_norm", c.clip_norm);
    read(j, "patience", c.patience);
    read(j, "min_count", c.min_count);
    read(j, "eval_batch_size", c.eval_batch_size);
    return c;
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, {"model", "train"}, "config");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json(config).dump(2) << '\n';
}

}  // namespace supattn
