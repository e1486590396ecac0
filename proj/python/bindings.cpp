#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <filesystem>

#include "json.hpp"
#include "supattn/config.hpp"
#include "supattn/decode.hpp"
#include "supattn/objective.hpp"
#include "supattn/supervision.hpp"
#include "supattn/synth.hpp"
#include "supattn/train.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace supattn;

namespace {

// Instances cross the boundary as corpus lines; the Python side holds dicts.
std::vector<Instance> parse_lines(const std::vector<std::string>& lines) {
    std::vector<Instance> out;
    out.reserve(lines.size());
    for (const auto& line : lines) {
        Instance inst = instance_from_json_line(line);
        if (auto err = instance_error(inst); !err.empty()) throw std::invalid_argument(inst.id + ": " + err);
        out.push_back(std::move(inst));
    }
    return out;
}

SupervisionKind kind_from(const std::string& name) {
    auto k = parse_supervision_kind(name);
    if (!k) throw std::invalid_argument("unknown supervision type: " + name);
    return *k;
}

Tensor matrix_from(const std::vector<std::vector<double>>& rows) {
    const std::size_t n = rows.size();
    std::vector<double> flat;
    for (const auto& r : rows) {
        if (r.size() != n) throw std::invalid_argument("attention matrix must be square");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor::from({n, n}, std::move(flat));
}

struct LoadedModel {
    Vocabulary vocab;
    std::unique_ptr<Model> model;
};

LoadedModel load_model(const fs::path& run, std::uint64_t seed, bool raw) {
    RunConfig config = load_run_config(run / "config.json");
    LoadedModel out{Vocabulary::load(run / "vocab.json"), nullptr};
    out.model = std::make_unique<Model>(config.model, seed);
    load_checkpoint(out.model->parameters(), run / ("seed-" + std::to_string(seed)) / (raw ? "raw.ckpt" : "best.ckpt"));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Supervised self-attention reader: core operations";

    m.def(
        "synth",
        [](std::size_t count, std::uint64_t seed, double pronoun_rate) {
            SynthOptions options;
            options.pronoun_rate = pronoun_rate;
            std::vector<std::string> lines;
            for (const auto& inst : synth_generate(count, seed, options)) lines.push_back(instance_to_json_line(inst));
            return lines;
        },
        py::arg("count"), py::arg("seed"), py::arg("pronoun_rate") = SynthOptions{}.pronoun_rate);

    m.def(
        "instance_error",
        [](const std::string& line) {
            try {
                return instance_error(instance_from_json_line(line));
            } catch (const std::exception& e) {
                return std::string(e.what());
            }
        },
        py::arg("line"));

    m.def(
        "build_supervision",
        [](const std::string& kind, const std::string& line) {
            Instance inst = instance_from_json_line(line);
            if (!inst.annotation) throw std::invalid_argument(inst.id + ": instance has no annotation");
            if (auto err = annotation_error(*inst.annotation, inst.context.size()); !err.empty())
                throw std::invalid_argument(inst.id + ": " + err);
            return build_supervision(kind_from(kind), *inst.annotation).rows;
        },
        py::arg("kind"), py::arg("line"));

    m.def(
        "supervision_loss",
        [](const std::vector<std::vector<double>>& attention, const std::vector<std::vector<std::size_t>>& rows,
           bool weight_by_targets) {
            SupervisionMatrix s;
            s.rows = rows;
            return supervision_loss(matrix_from(attention), s, weight_by_targets).item();
        },
        py::arg("attention"), py::arg("rows"), py::arg("weight_by_targets") = true);

    m.def(
        "answer_loss",
        [](const std::vector<double>& probs, const std::vector<std::size_t>& positions) {
            return answer_loss(Tensor::from({probs.size()}, probs), positions).item();
        },
        py::arg("probs"), py::arg("positions"));

    m.def(
        "pointer_sum_decode",
        [](const std::vector<double>& probs, const std::vector<std::string>& tokens, bool lowercase) {
            Prediction p = pointer_sum_decode(probs, tokens, lowercase);
            return py::make_tuple(p.predicted_word, p.summed_prob, p.per_type_probs);
        },
        py::arg("probs"), py::arg("tokens"), py::arg("lowercase") = false);

    m.def(
        "noam_lr",
        [](std::size_t d_model, std::size_t warmup, std::size_t step) { return noam_lr({d_model, warmup, step}); },
        py::arg("d_model"), py::arg("warmup"), py::arg("step"));

    m.def(
        "train",
        [](const std::string& config_json, const std::vector<std::string>& train_lines,
           const std::vector<std::string>& dev_lines, const std::vector<std::uint64_t>& seeds, const fs::path& out) {
            RunConfig config = run_config_from_json(nlohmann::json::parse(config_json));
            auto train = parse_lines(train_lines);
            auto dev = parse_lines(dev_lines);
            Vocabulary vocab = Vocabulary::build(train, config.train.min_count);
            config.model.word_vocab = vocab.word_count();
            config.model.char_vocab = vocab.char_count();
            if (auto err = config_error(config.model); !err.empty()) throw std::invalid_argument(err);
            fs::create_directories(out);
            save_run_config(config, out / "config.json");
            vocab.save(out / "vocab.json");
            MultiSeedResult result;
            {
                py::gil_scoped_release release;
                result = multi_seed(config.model, config.train, vocab, train, dev, seeds, out);
            }
            nlohmann::json runs = nlohmann::json::array();
            for (const auto& r : result.runs)
                runs.push_back({{"seed", r.seed},
                                {"aborted", r.aborted},
                                {"message", r.message},
                                {"epochs_run", r.epochs_run},
                                {"best_epoch", r.best_epoch},
                                {"best_dev_accuracy", r.best_dev_accuracy},
                                {"dev_accuracies", r.dev_accuracies}});
            nlohmann::json summary{{"runs", runs}, {"excluded", result.excluded}};
            if (result.summary.runs) {
                summary["mean"] = result.summary.mean;
                summary["max"] = result.summary.max;
                summary["stddev"] = result.summary.stddev;
            }
            return summary.dump();
        },
        py::arg("config_json"), py::arg("train"), py::arg("dev"), py::arg("seeds"), py::arg("out"));

    m.def(
        "evaluate",
        [](const fs::path& run, const std::vector<std::string>& lines, std::uint64_t seed, bool raw) {
            auto data = parse_lines(lines);
            LoadedModel loaded = load_model(run, seed, raw);
            EvalReport report;
            double mass = 0.0;
            {
                py::gil_scoped_release release;
                report = evaluate(*loaded.model, loaded.vocab, data, {});
                if (!loaded.model->config().supervision.empty()) mass = mean_target_mass(*loaded.model, loaded.vocab, data);
            }
            nlohmann::json out{{"count", report.count},
                               {"correct", report.correct},
                               {"accuracy", report.accuracy()},
                               {"unanswerable", report.unanswerable},
                               {"predictions", report.predictions}};
            if (!loaded.model->config().supervision.empty()) out["target_mass"] = mass;
            return out.dump();
        },
        py::arg("run"), py::arg("data"), py::arg("seed"), py::arg("raw") = false);
}
