#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "supattn/data.hpp"
#include "supattn/model.hpp"

namespace supattn {

struct Prediction {
    std::string predicted_word;
    double summed_prob = 0.0;
    // Word types in order of first occurrence with their summed probability.
    std::vector<std::pair<std::string, double>> per_type_probs;
};

// Sums probability per distinct token and returns the best type; on an exact
// tie the type that occurs first in the context wins.
Prediction pointer_sum_decode(std::span<const double> answer_probs, const std::vector<std::string>& context_tokens,
                              bool lowercase = false);

struct SubsetResult {
    std::size_t count = 0;
    std::size_t correct = 0;
    double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

struct EvalReport {
    std::size_t count = 0;
    std::size_t correct = 0;
    std::size_t unanswerable = 0;  // answer absent from the context
    std::map<std::string, SubsetResult> subsets;
    std::vector<std::string> notices;
    std::vector<std::string> predictions;  // one per instance, dataset order

    double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

struct EvalOptions {
    bool pos_subsets = false;
    bool entity_subsets = false;
    bool lowercase = false;
    std::size_t batch_size = 32;
};

// Subset labels for one instance; empty optional when the instance lacks the
// annotation the partition needs.
std::optional<std::string> pos_subset(const Instance& instance);
std::optional<std::string> entity_subset(const Instance& instance);

// Scores precomputed predictions against the dataset.
EvalReport score_predictions(const std::vector<Instance>& dataset, const std::vector<std::string>& predictions,
                             const EvalOptions& options);

EvalReport evaluate(const Model& model, const Vocabulary& vocab, const std::vector<Instance>& dataset,
                    const EvalOptions& options = {});

// Fraction of positions with identical predictions.
double agreement(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Mean over supervised rows of the attention mass on target columns.
double target_mass(const Tensor& attention, const SupervisionMatrix& targets);

// Mean target mass of every supervised head of `model` over `dataset`
// (instances with at least one supervised row), in eval mode.
double mean_target_mass(const Model& model, const Vocabulary& vocab, const std::vector<Instance>& dataset);

void write_report(std::ostream& out, const EvalReport& report);

}  // namespace supattn
