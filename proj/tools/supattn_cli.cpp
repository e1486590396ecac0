// supattn command line: synth, validate, build-supervision, train, eval,
// inspect-attention. Exit codes: 0 ok, 1 usage, 2 data validation, 3 runtime.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "supattn/config.hpp"
#include "supattn/data.hpp"
#include "supattn/decode.hpp"
#include "supattn/model.hpp"
#include "supattn/supervision.hpp"
#include "supattn/synth.hpp"
#include "supattn/train.hpp"

namespace fs = std::filesystem;
using namespace supattn;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kRuntime = 3;

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string command_line;

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void require_file(const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw DataError(std::string(what) + " not found: " + p.string());
}

// Written before any real work so the run can be reproduced from it.
void write_manifest(const fs::path& file, const std::string& command, ojson details) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    ojson m;
    m["command"] = command;
    m["command_line"] = command_line;
    m["timestamp"] = utc_timestamp();
    for (auto& [k, v] : details.items()) m[k] = v;
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write manifest " + file.string());
    out << m.dump(2) << '\n';
}

fs::path sidecar_manifest(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

std::vector<Instance> load_valid(const fs::path& path, const char* what) {
    require_file(path, what);
    CorpusLoad load = load_corpus(path);
    if (!load.errors.empty()) {
        std::ostringstream msg;
        msg << path.string() << ": " << load.errors.size() << " invalid line(s); first at line "
            << load.errors.front().line << ": " << load.errors.front().reason;
        throw DataError(msg.str());
    }
    if (load.instances.empty()) throw DataError(path.string() + " contains no instances");
    return load.instances;
}

std::vector<SupervisionKind> parse_kinds(const std::string& list) {
    std::vector<SupervisionKind> kinds;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto kind = parse_supervision_kind(item);
        if (!kind) throw CLI::ValidationError("--type", "unknown supervision type '" + item + "'");
        kinds.push_back(*kind);
    }
    if (kinds.empty()) throw CLI::ValidationError("--type", "no supervision type given");
    return kinds;
}

// Loads config, vocabulary and the checkpoint of one seed from a run dir.
struct LoadedRun {
    RunConfig config;
    Vocabulary vocab;
    std::unique_ptr<Model> model;
    std::uint64_t seed = 0;
    fs::path checkpoint;
};

LoadedRun load_run(const fs::path& run, std::optional<std::uint64_t> seed, bool raw) {
    require_file(run / "config.json", "run config");
    require_file(run / "vocab.json", "vocabulary");
    LoadedRun out;
    out.config = load_run_config(run / "config.json");
    out.vocab = Vocabulary::load(run / "vocab.json");
    if (!seed) {
        std::vector<std::uint64_t> found;
        for (const auto& entry : fs::directory_iterator(run)) {
            const auto name = entry.path().filename().string();
            if (entry.is_directory() && name.rfind("seed-", 0) == 0) found.push_back(std::stoull(name.substr(5)));
        }
        if (found.empty()) throw DataError("no seed-N directories under " + run.string());
        seed = *std::min_element(found.begin(), found.end());
    }
    out.seed = *seed;
    out.checkpoint = run / ("seed-" + std::to_string(*seed)) / (raw ? "raw.ckpt" : "best.ckpt");
    require_file(out.checkpoint, "checkpoint");
    ModelConfig mc = out.config.model;
    if (mc.word_vocab != out.vocab.word_count() || mc.char_vocab != out.vocab.char_count()) {
        throw DataError("config vocabulary sizes do not match " + (run / "vocab.json").string());
    }
    out.model = std::make_unique<Model>(mc, *seed);
    try {
        load_checkpoint(out.model->parameters(), out.checkpoint);
    } catch (const std::exception& e) {
        throw DataError("checkpoint does not match the run config: " + std::string(e.what()));
    }
    return out;
}

// ---------------------------------------------------------------------------

int run_synth(std::size_t count, std::uint64_t seed, const fs::path& out, const SynthOptions& options) {
    write_manifest(sidecar_manifest(out), "synth",
                   {{"output", out.string()}, {"seeds", {seed}}, {"count", count},
                    {"min_entities", options.min_entities}, {"max_entities", options.max_entities}});
    auto instances = synth_generate(count, seed, options);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_corpus(out, instances);
    std::cout << "wrote " << instances.size() << " instances to " << out.string() << '\n';
    return 0;
}

int run_validate(const fs::path& input) {
    require_file(input, "corpus");
    CorpusReader reader(input);
    std::size_t valid = 0, annotated = 0, answerable = 0;
    while (auto inst = reader.next()) {
        ++valid;
        annotated += inst->annotation.has_value();
        answerable += answer_in_context(*inst);
    }
    for (const auto& e : reader.errors()) std::cout << input.string() << ":" << e.line << ": " << e.reason << '\n';
    std::cout << "valid " << valid << ", invalid " << reader.errors().size() << ", annotated " << annotated
              << ", answer-in-context " << answerable << '\n';
    return reader.errors().empty() ? 0 : kData;
}

int run_build_supervision(const fs::path& input, const std::vector<SupervisionKind>& kinds, const fs::path& out) {
    ojson names = ojson::array();
    for (auto k : kinds) names.push_back(std::string(to_string(k)));
    write_manifest(sidecar_manifest(out), "build-supervision",
                   {{"data", {input.string()}}, {"types", names}, {"output", out.string()}});
    auto instances = load_valid(input, "corpus");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream file(out);
    if (!file) throw std::runtime_error("cannot write " + out.string());

    struct Stats {
        std::size_t matrices = 0, k = 0, targets = 0;
    };
    std::map<SupervisionKind, Stats> stats;
    std::size_t skipped = 0;
    for (const auto& inst : instances) {
        if (!inst.annotation) {
            std::cerr << "skip " << inst.id << ": no annotation\n";
            ++skipped;
            continue;
        }
        for (auto kind : kinds) {
            SupervisionMatrix m;
            try {
                m = build_supervision(kind, *inst.annotation);
            } catch (const std::exception& e) {
                std::cerr << "skip " << inst.id << " (" << to_string(kind) << "): " << e.what() << '\n';
                ++skipped;
                continue;
            }
            ojson rec{{"id", inst.id}, {"kind", std::string(to_string(kind))}, {"n", m.size()}, {"k", m.k()}};
            rec["rows"] = m.rows;
            file << rec.dump() << '\n';
            auto& s = stats[kind];
            ++s.matrices;
            s.k += m.k();
            s.targets += m.nonzeros();
        }
    }
    for (const auto& [kind, s] : stats) {
        const double mean_k = s.matrices ? static_cast<double>(s.k) / static_cast<double>(s.matrices) : 0.0;
        const double per_row = s.k ? static_cast<double>(s.targets) / static_cast<double>(s.k) : 0.0;
        std::printf("%-10s matrices %zu  mean k %.3f  mean targets per row %.3f\n", std::string(to_string(kind)).c_str(),
                    s.matrices, mean_k, per_row);
    }
    if (skipped) std::printf("skipped %zu\n", skipped);
    return 0;
}

int run_train(const fs::path& config_path, const fs::path& train_path, const fs::path& dev_path,
              const std::vector<std::uint64_t>& seeds, const fs::path& out, const std::optional<fs::path>& stopwords_path) {
    require_file(config_path, "config");
    ojson details{{"config", config_path.string()},
                  {"data", {{"train", train_path.string()}, {"dev", dev_path.string()}}},
                  {"seeds", seeds},
                  {"output", out.string()}};
    if (stopwords_path) details["stopwords"] = stopwords_path->string();
    write_manifest(out / "manifest.json", "train", details);

    RunConfig config;
    try {
        config = load_run_config(config_path);
    } catch (const std::invalid_argument& e) {
        throw DataError(e.what());
    }
    auto train = load_valid(train_path, "training corpus");
    auto dev = load_valid(dev_path, "dev corpus");
    std::set<std::string> stopwords;
    if (stopwords_path) {
        require_file(*stopwords_path, "stopword list");
        stopwords = load_stopwords(*stopwords_path);
    }
    const std::size_t before = train.size();
    train = filter_training(train, stopwords);
    std::cout << "training instances: " << train.size() << " of " << before << " kept after filtering\n";
    if (train.empty()) throw DataError("no training instances survive filtering");

    Vocabulary vocab = Vocabulary::build(train, config.train.min_count);
    config.model.word_vocab = vocab.word_count();
    config.model.char_vocab = vocab.char_count();
    if (auto err = config_error(config.model); !err.empty()) throw DataError("invalid model config: " + err);
    save_run_config(config, out / "config.json");
    vocab.save(out / "vocab.json");

    MultiSeedResult result = multi_seed(config.model, config.train, vocab, train, dev, seeds, out);
    ojson runs = ojson::array();
    for (const auto& r : result.runs) {
        runs.push_back({{"seed", r.seed},
                        {"aborted", r.aborted},
                        {"message", r.message},
                        {"epochs_run", r.epochs_run},
                        {"best_epoch", r.best_epoch},
                        {"best_dev_accuracy", r.best_dev_accuracy},
                        {"dev_accuracies", r.dev_accuracies}});
        std::printf("seed %llu: best dev accuracy %.4f at epoch %zu%s\n", static_cast<unsigned long long>(r.seed),
                    r.best_dev_accuracy, r.best_epoch, r.aborted ? (" (aborted: " + r.message + ")").c_str() : "");
    }
    ojson summary{{"runs", runs}, {"excluded", result.excluded}};
    if (result.summary.runs) {
        summary["mean"] = result.summary.mean;
        summary["max"] = result.summary.max;
        summary["stddev"] = result.summary.stddev;
        std::printf("dev accuracy mean %.4f (max %.4f, std %.4f) over %zu run(s)\n", result.summary.mean,
                    result.summary.max, result.summary.stddev, result.summary.runs);
    }
    std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
    return result.summary.runs ? 0 : kRuntime;
}

std::vector<std::pair<std::string, std::string>> read_predictions(const fs::path& path) {
    require_file(path, "prediction file");
    std::ifstream in(path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError(path.string() + ": expected 'id<TAB>prediction' lines");
        out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return out;
}

int run_eval(const fs::path& run, const fs::path& data, std::optional<std::uint64_t> seed, bool raw,
             const std::string& subsets, const std::optional<fs::path>& agree, const fs::path& out, bool lowercase) {
    ojson details{{"run", run.string()}, {"data", {data.string()}}, {"output", out.string()}, {"subsets", subsets}};
    if (seed) details["seeds"] = {*seed};
    if (agree) details["agree"] = agree->string();
    write_manifest(out / "manifest.json", "eval", details);

    LoadedRun loaded = load_run(run, seed, raw);
    auto dataset = load_valid(data, "corpus");
    EvalOptions options;
    options.lowercase = lowercase;
    std::stringstream ss(subsets);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "pos") options.pos_subsets = true;
        else if (item == "entity") options.entity_subsets = true;
        else if (!item.empty()) throw CLI::ValidationError("--subsets", "unknown subset '" + item + "'");
    }
    EvalReport report = evaluate(*loaded.model, loaded.vocab, dataset, options);

    fs::create_directories(out);
    {
        std::ofstream preds(out / "predictions.tsv");
        for (std::size_t i = 0; i < dataset.size(); ++i) preds << dataset[i].id << '\t' << report.predictions[i] << '\n';
    }
    ojson summary{{"seed", loaded.seed},
                  {"checkpoint", loaded.checkpoint.string()},
                  {"count", report.count},
                  {"correct", report.correct},
                  {"accuracy", report.accuracy()},
                  {"unanswerable", report.unanswerable}};
    ojson subset_json = ojson::object();
    for (const auto& [name, s] : report.subsets) subset_json[name] = {{"count", s.count}, {"accuracy", s.accuracy()}};
    summary["subsets"] = subset_json;
    summary["notices"] = report.notices;
    if (agree) {
        auto other = read_predictions(*agree);
        if (other.size() != dataset.size()) {
            throw DataError("agreement file has " + std::to_string(other.size()) + " predictions for " +
                            std::to_string(dataset.size()) + " instances");
        }
        std::vector<std::string> theirs;
        for (std::size_t i = 0; i < other.size(); ++i) {
            if (other[i].first != dataset[i].id) throw DataError("agreement file is not in dataset order at " + other[i].first);
            theirs.push_back(other[i].second);
        }
        summary["agreement"] = agreement(report.predictions, theirs);
    }
    std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
    std::ofstream text(out / "report.txt");
    write_report(text, report);
    write_report(std::cout, report);
    if (agree) std::printf("agreement %.4f\n", summary["agreement"].get<double>());
    return 0;
}

int run_inspect(const fs::path& run, const fs::path& data, const std::string& id, std::optional<std::uint64_t> seed,
                const fs::path& out) {
    ojson details{{"run", run.string()}, {"data", {data.string()}}, {"id", id}, {"output", out.string()}};
    if (seed) details["seeds"] = {*seed};
    write_manifest(sidecar_manifest(out), "inspect-attention", details);

    LoadedRun loaded = load_run(run, seed, false);
    auto dataset = load_valid(data, "corpus");
    auto it = std::find_if(dataset.begin(), dataset.end(), [&](const Instance& x) { return x.id == id; });
    if (it == dataset.end()) throw DataError("instance '" + id + "' not found in " + data.string());

    const ModelConfig& mc = loaded.model->config();
    BatchOptions options = batch_options_for(mc, false);
    if (!it->annotation) options.supervision.clear();
    if (!it->annotation) options.sentence_windows = false;
    NoGradGuard no_grad;
    Batch batch = make_batch(std::vector<const Instance*>{&*it}, loaded.vocab, options);
    ForwardOutput fwd = loaded.model->forward(batch, Mode::eval);
    const InstanceOutput& inst = fwd.instances.front();
    const std::size_t n = it->context.size();

    ojson heads = ojson::array();
    for (const auto& cap : inst.attention) {
        ojson h{{"location", std::string(to_string(cap.location))}, {"layer", cap.layer}, {"head", cap.head}};
        ojson matrix = ojson::array();
        for (std::size_t i = 0; i < n; ++i) {
            ojson row = ojson::array();
            for (std::size_t j = 0; j < n; ++j) row.push_back(cap.weights.at(i, j));
            matrix.push_back(row);
        }
        h["supervision"] = nullptr;
        h["target_mass"] = nullptr;
        for (const auto& a : mc.supervision) {
            if (a.location != cap.location || a.layer != cap.layer || a.head != cap.head) continue;
            h["supervision"] = std::string(to_string(a.kind));
            auto sit = batch.supervision.find(a.kind);
            if (sit == batch.supervision.end()) break;
            const auto& targets = sit->second.front();
            ojson mass = ojson::array();
            for (std::size_t i = 0; i < n; ++i) {
                if (targets.rows[i].empty()) {
                    mass.push_back(nullptr);
                    continue;
                }
                double m = 0.0;
                for (auto j : targets.rows[i]) m += cap.weights.at(i, j);
                mass.push_back(m);
            }
            h["target_mass"] = mass;
            h["mean_target_mass"] = target_mass(cap.weights, targets);
        }
        h["matrix"] = matrix;
        heads.push_back(h);
    }
    Prediction pred = pointer_sum_decode(inst.answer_probs.data(), it->context);
    ojson dump{{"id", it->id},    {"tokens", it->context},     {"query", it->query},
               {"answer", it->answer}, {"prediction", pred.predicted_word}, {"heads", heads}};
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream file(out);
    if (!file) throw std::runtime_error("cannot write " + out.string());
    file << dump.dump() << '\n';
    std::cout << "wrote " << heads.size() << " attention heads for " << it->id << " to " << out.string() << '\n';
    return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw CLI::ValidationError("--seeds", "not a seed: '" + item + "'");
        }
    }
    if (seeds.empty()) throw CLI::ValidationError("--seeds", "no seeds given");
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

    CLI::App app{"Supervised self-attention reading comprehension"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic annotated corpus");
    std::size_t count = 0;
    std::uint64_t synth_seed = 0;
    fs::path synth_out;
    SynthOptions synth_options;
    synth->add_option("--count", count, "Number of instances")->required()->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "Random seed")->required();
    synth->add_option("--out", synth_out, "Output corpus file")->required();
    synth->add_option("--min-entities", synth_options.min_entities)->capture_default_str();
    synth->add_option("--max-entities", synth_options.max_entities)->capture_default_str();

    // validate
    auto* validate = app.add_subcommand("validate", "Check a corpus file against the schema");
    fs::path validate_in;
    validate->add_option("input", validate_in, "Corpus file")->required();

    // build-supervision
    auto* build = app.add_subcommand("build-supervision", "Build supervision matrices for a corpus");
    fs::path build_in, build_out;
    std::string build_types;
    build->add_option("--input", build_in, "Annotated corpus")->required();
    build->add_option("--type", build_types, "Comma-separated: depparse,corefall,corefprev,corefnext,narrative")->required();
    build->add_option("--out", build_out, "Output JSONL file")->required();

    // train
    auto* train = app.add_subcommand("train", "Train one run per seed");
    fs::path config_path, train_path, dev_path, train_out;
    std::string seeds_arg = "1";
    std::optional<fs::path> stopwords;
    train->add_option("--config", config_path, "JSON config with model and train sections")->required();
    train->add_option("--train", train_path, "Training corpus")->required();
    train->add_option("--dev", dev_path, "Dev corpus")->required();
    train->add_option("--seeds", seeds_arg, "Comma-separated seeds")->capture_default_str();
    train->add_option("--out", train_out, "Run directory")->required();
    train->add_option("--stopwords", stopwords, "Stopword list used to filter training answers");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a trained run");
    fs::path eval_run, eval_data, eval_out;
    std::optional<std::uint64_t> eval_seed;
    std::string subsets;
    std::optional<fs::path> agree;
    bool raw = false, lowercase = false;
    eval->add_option("--run", eval_run, "Run directory")->required();
    eval->add_option("--data", eval_data, "Corpus to evaluate")->required();
    eval->add_option("--seed", eval_seed, "Seed whose checkpoint to load (default: smallest)");
    eval->add_option("--subsets", subsets, "Comma-separated partitions: pos,entity");
    eval->add_option("--agree", agree, "Prediction file to compute agreement against");
    eval->add_option("--out", eval_out, "Output directory (default: <run>/eval)");
    eval->add_flag("--raw", raw, "Use raw weights instead of the moving average");
    eval->add_flag("--lowercase", lowercase, "Case-insensitive answer matching");

    // inspect-attention
    auto* inspect = app.add_subcommand("inspect-attention", "Dump attention matrices for one instance");
    fs::path inspect_run, inspect_data, inspect_out;
    std::string inspect_id;
    std::optional<std::uint64_t> inspect_seed;
    inspect->add_option("--run", inspect_run, "Run directory")->required();
    inspect->add_option("--data", inspect_data, "Corpus containing the instance")->required();
    inspect->add_option("--id", inspect_id, "Instance id")->required();
    inspect->add_option("--seed", inspect_seed, "Seed whose checkpoint to load (default: smallest)");
    inspect->add_option("--out", inspect_out, "Output JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kUsage;
    }

    try {
        if (*synth) return run_synth(count, synth_seed, synth_out, synth_options);
        if (*validate) return run_validate(validate_in);
        if (*build) return run_build_supervision(build_in, parse_kinds(build_types), build_out);
        if (*train) return run_train(config_path, train_path, dev_path, parse_seeds(seeds_arg), train_out, stopwords);
        if (*eval) {
            return run_eval(eval_run, eval_data, eval_seed, raw, subsets, agree,
                            eval_out.empty() ? eval_run / "eval" : eval_out, lowercase);
        }
        if (*inspect) return run_inspect(inspect_run, inspect_data, inspect_id, inspect_seed, inspect_out);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
