#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "supattn/supervision.hpp"
#include "supattn/tensor.hpp"

namespace supattn {

inline constexpr double kProbabilityFloor = 1e-12;

// -log of the probability mass on every occurrence of the answer, floored at
// kProbabilityFloor. probs: (n). Throws on an empty position set.
Tensor answer_loss(const Tensor& probs, std::span<const std::size_t> answer_positions);

// Attention-supervision loss of an (n, n) attention matrix:
//   (1/k) * sum over rows with targets of  -log(sum_j A_ij S_ij) * sum_j S_ij
// where k counts rows with at least one target. With `weight_by_targets`
// off, each supervised row contributes -log(mass) once. Zero (and constant)
// when S has no targets.
Tensor supervision_loss(const Tensor& attention, const SupervisionMatrix& targets, bool weight_by_targets = true);

struct LossBreakdown {
    double answer_loss = 0.0;
    std::map<std::string, double> supervision_losses;
    double lambda = 0.0;
    double total = 0.0;
};

// total = answer + lambda * sum(supervision); rejects non-finite or negative
// components, naming the component.
LossBreakdown total_loss(double answer, const std::map<std::string, double>& supervision, double lambda);

// Differentiable counterpart used in training.
struct CombinedLoss {
    Tensor total;
    LossBreakdown breakdown;
};
CombinedLoss combine_losses(const Tensor& answer, const std::vector<std::pair<std::string, Tensor>>& supervision,
                            double lambda);

// Mean over instances of each component; the total is recomputed from the means.
LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& parts);

}  // namespace supattn
