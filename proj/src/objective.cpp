#include "supattn/objective.hpp"

#include <cmath>
#include <stdexcept>

namespace supattn {

Tensor answer_loss(const Tensor& probs, std::span<const std::size_t> answer_positions) {
    if (answer_positions.empty()) throw std::invalid_argument("answer_loss: answer does not occur in the context");
    Tensor mass = sum_all(gather_rows(probs, answer_positions));
    return scale(log(clamp_min(mass, kProbabilityFloor)), -1.0);
}

Tensor supervision_loss(const Tensor& attention, const SupervisionMatrix& targets, bool weight_by_targets) {
    const std::size_t n = targets.size();
    if (attention.shape() != Shape{n, n}) {
        throw ShapeError("supervision_loss: attention " + shape_str(attention.shape()) + " vs supervision of size " +
                         std::to_string(n));
    }
    std::vector<std::size_t> rows;
    std::vector<double> weights;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets.rows[i].empty()) continue;
        rows.push_back(i);
        weights.push_back(weight_by_targets ? static_cast<double>(targets.rows[i].size()) : 1.0);
    }
    if (rows.empty()) return Tensor::scalar(0.0);

    Tensor mass = sum(mul(attention, targets.dense()), 1);  // (n)
    Tensor nll = scale(log(clamp_min(gather_rows(mass, rows), kProbabilityFloor)), -1.0);
    const std::size_t k = rows.size();
    Tensor weighted = mul(nll, Tensor::from({k}, std::move(weights)));
    return scale(sum_all(weighted), 1.0 / static_cast<double>(k));
}

namespace {
void require_component(const std::string& name, double value) {
    if (!std::isfinite(value)) throw std::invalid_argument("loss component " + name + " is not finite");
    if (value < 0.0) throw std::invalid_argument("loss component " + name + " is negative");
}
}  // namespace

LossBreakdown total_loss(double answer, const std::map<std::string, double>& supervision, double lambda) {
    require_component("answer", answer);
    if (!std::isfinite(lambda)) throw std::invalid_argument("lambda is not finite");
    LossBreakdown out;
    out.answer_loss = answer;
    out.lambda = lambda;
    double aux = 0.0;
    for (const auto& [name, value] : supervision) {
        require_component(name, value);
        aux += value;
    }
    out.supervision_losses = supervision;
    out.total = lambda == 0.0 ? answer : answer + lambda * aux;
    return out;
}

CombinedLoss combine_losses(const Tensor& answer, const std::vector<std::pair<std::string, Tensor>>& supervision,
                            double lambda) {
    std::map<std::string, double> values;
    Tensor total = answer;
    for (const auto& [name, loss] : supervision) {
        values[name] += loss.item();
        if (lambda != 0.0) total = add(total, scale(loss, lambda));
    }
    CombinedLoss out;
    out.breakdown = total_loss(answer.item(), values, lambda);
    out.total = total;
    return out;
}

LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& parts) {
    if (parts.empty()) throw std::invalid_argument("mean_breakdown: no instances");
    const double count = static_cast<double>(parts.size());
    double answer = 0.0;
    std::map<std::string, double> aux;
    for (const auto& p : parts) {
        answer += p.answer_loss;
        for (const auto& [name, v] : p.supervision_losses) aux[name] += v;
    }
    for (auto& [name, v] : aux) v /= count;
    return total_loss(answer / count, aux, parts.front().lambda);
}

}  // namespace supattn
