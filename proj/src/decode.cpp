#include "supattn/decode.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

namespace supattn {

namespace {

std::string lower(const std::string& s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

const std::set<std::string>& pronoun_tags() {
    static const std::set<std::string> tags{"PRP", "PRP$", "PRON", "WP"};
    return tags;
}

bool is_noun_tag(const std::string& tag) { return tag.rfind("NN", 0) == 0 || tag == "NOUN" || tag == "PROPN"; }

std::vector<const Instance*> pointers(const std::vector<Instance>& dataset, std::size_t begin, std::size_t end) {
    std::vector<const Instance*> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(&dataset[i]);
    return out;
}

}  // namespace

Prediction pointer_sum_decode(std::span<const double> answer_probs, const std::vector<std::string>& context_tokens,
                              bool lowercase) {
    if (context_tokens.empty()) throw std::invalid_argument("pointer_sum_decode: empty context");
    if (answer_probs.size() < context_tokens.size()) {
        throw std::invalid_argument("pointer_sum_decode: " + std::to_string(answer_probs.size()) +
                                    " probabilities for " + std::to_string(context_tokens.size()) + " tokens");
    }
    Prediction out;
    std::unordered_map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < context_tokens.size(); ++i) {
        std::string key = lowercase ? lower(context_tokens[i]) : context_tokens[i];
        auto [it, fresh] = slot.emplace(key, out.per_type_probs.size());
        if (fresh) out.per_type_probs.emplace_back(key, 0.0);
        out.per_type_probs[it->second].second += answer_probs[i];
    }
    std::size_t best = 0;
    for (std::size_t t = 1; t < out.per_type_probs.size(); ++t)
        if (out.per_type_probs[t].second > out.per_type_probs[best].second) best = t;
    out.predicted_word = out.per_type_probs[best].first;
    out.summed_prob = out.per_type_probs[best].second;
    return out;
}

std::optional<std::string> pos_subset(const Instance& instance) {
    if (!instance.annotation || instance.annotation->pos.empty()) return std::nullopt;
    auto positions = answer_positions(instance);
    if (positions.empty()) return std::nullopt;
    const auto& tag = instance.annotation->pos[positions.front()];
    if (pronoun_tags().count(tag)) return "pos:pronoun";
    if (is_noun_tag(tag)) return "pos:noun";
    return "pos:other";
}

std::optional<std::string> entity_subset(const Instance& instance) {
    if (!instance.annotation || instance.annotation->entities.empty()) return std::nullopt;
    auto positions = answer_positions(instance);
    if (positions.empty()) return "entity:other";
    return instance.annotation->entities[positions.front()] == "PERSON" ? "entity:person" : "entity:other";
}

EvalReport score_predictions(const std::vector<Instance>& dataset, const std::vector<std::string>& predictions,
                             const EvalOptions& options) {
    if (dataset.size() != predictions.size()) {
        throw std::invalid_argument("score_predictions: " + std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(dataset.size()) + " instances");
    }
    EvalReport report;
    report.predictions = predictions;
    std::size_t missing_pos = 0, missing_entities = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& inst = dataset[i];
        const std::string answer = options.lowercase ? lower(inst.answer) : inst.answer;
        const bool correct = answer_in_context(inst, options.lowercase) && predictions[i] == answer;
        if (!answer_in_context(inst, options.lowercase)) ++report.unanswerable;
        ++report.count;
        report.correct += correct;
        auto tally = [&](const std::optional<std::string>& name) {
            if (!name) return false;
            auto& s = report.subsets[*name];
            ++s.count;
            s.correct += correct;
            return true;
        };
        if (options.pos_subsets && !tally(pos_subset(inst))) ++missing_pos;
        if (options.entity_subsets && !tally(entity_subset(inst))) ++missing_entities;
    }
    if (options.pos_subsets && missing_pos) {
        report.notices.push_back(std::to_string(missing_pos) + " instances lack answer POS tags; left out of the POS partition");
    }
    if (options.entity_subsets && missing_entities == dataset.size()) {
        report.notices.push_back("no entity labels in the annotation; entity partition skipped");
    } else if (options.entity_subsets && missing_entities) {
        report.notices.push_back(std::to_string(missing_entities) + " instances lack entity labels; left out of the entity partition");
    }
    if (report.unanswerable) {
        report.notices.push_back(std::to_string(report.unanswerable) + " instances are unanswerable (answer not in context)");
    }
    return report;
}

EvalReport evaluate(const Model& model, const Vocabulary& vocab, const std::vector<Instance>& dataset,
                    const EvalOptions& options) {
    NoGradGuard no_grad;
    FlushDenormalsGuard flush;
    BatchOptions batch_options = batch_options_for(model.config(), false);
    batch_options.supervision.clear();
    batch_options.lowercase_answers = options.lowercase;
    std::vector<std::string> predictions;
    predictions.reserve(dataset.size());
    const std::size_t step = std::max<std::size_t>(1, options.batch_size);
    for (std::size_t begin = 0; begin < dataset.size(); begin += step) {
        const std::size_t end = std::min(dataset.size(), begin + step);
        Batch batch = make_batch(pointers(dataset, begin, end), vocab, batch_options);
        ForwardOutput out = model.forward(batch, Mode::eval);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            predictions.push_back(
                pointer_sum_decode(out.instances[b].answer_probs.data(), batch.context_tokens[b], options.lowercase)
                    .predicted_word);
        }
        Tape::current().clear();
    }
    return score_predictions(dataset, predictions, options);
}

double agreement(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("agreement: prediction lists differ in length (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    }
    if (a.empty()) return 1.0;
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    return static_cast<double>(same) / static_cast<double>(a.size());
}

double target_mass(const Tensor& attention, const SupervisionMatrix& targets) {
    const std::size_t n = attention.dim(0);
    double total = 0.0;
    std::size_t rows = 0;
    auto a = attention.data();
    for (std::size_t i = 0; i < std::min(n, targets.size()); ++i) {
        if (targets.rows[i].empty()) continue;
        double mass = 0.0;
        for (auto j : targets.rows[i]) mass += a[i * n + j];
        total += mass;
        ++rows;
    }
    return rows ? total / static_cast<double>(rows) : 0.0;
}

double mean_target_mass(const Model& model, const Vocabulary& vocab, const std::vector<Instance>& dataset) {
    const auto& config = model.config();
    if (config.supervision.empty()) throw std::invalid_argument("mean_target_mass: model has no supervised heads");
    NoGradGuard no_grad;
    BatchOptions options = batch_options_for(config, false);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t begin = 0; begin < dataset.size(); begin += 32) {
        const std::size_t end = std::min(dataset.size(), begin + 32);
        Batch batch = make_batch(pointers(dataset, begin, end), vocab, options);
        ForwardOutput out = model.forward(batch, Mode::eval);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (const auto& a : config.supervision) {
                const auto& targets = batch.supervision.at(a.kind)[b];
                if (targets.k() == 0) continue;
                total += target_mass(out.instances[b].attention_at(a.location, a.layer, a.head), targets);
                ++count;
            }
        }
        Tape::current().clear();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

void write_report(std::ostream& out, const EvalReport& report) {
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %8s %8s %9s\n", "subset", "count", "correct", "accuracy");
    out << line;
    std::snprintf(line, sizeof line, "%-18s %8zu %8zu %9.4f\n", "all", report.count, report.correct, report.accuracy());
    out << line;
    for (const auto& [name, s] : report.subsets) {
        std::snprintf(line, sizeof line, "%-18s %8zu %8zu %9.4f\n", name.c_str(), s.count, s.correct, s.accuracy());
        out << line;
    }
    for (const auto& n : report.notices) out << "note: " << n << '\n';
}

}  // namespace supattn
