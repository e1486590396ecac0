#include "supattn/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "supattn/decode.hpp"

namespace supattn {

double noam_lr(const SchedulerState& s) {
    if (s.step == 0) throw std::invalid_argument("noam_lr: step must be at least 1");
    if (s.d_model == 0 || s.warmup == 0) throw std::invalid_argument("noam_lr: d_model and warmup must be positive");
    const double step = static_cast<double>(s.step);
    const double warmup = static_cast<double>(s.warmup);
    return std::pow(static_cast<double>(s.d_model), -0.5) * std::min(std::pow(step, -0.5), step * std::pow(warmup, -1.5));
}

// ---------------------------------------------------------------------------

Adam::Adam(const ParameterStore& store, AdamOptions options) : options_(options) {
    for (const auto& path : store.paths()) {
        const std::size_t n = store.get(path).numel();
        m_[path].assign(n, 0.0);
        v_[path].assign(n, 0.0);
    }
}

bool Adam::step(ParameterStore& store, double lr) {
    for (const auto& path : store.paths()) {
        const Tensor& p = store.get(path);
        if (!p.has_grad()) continue;
        for (double g : p.grad())
            if (!std::isfinite(g)) return false;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (const auto& path : store.paths()) {
        Tensor p = store.get(path);
        if (!p.has_grad()) continue;
        auto grad = p.grad();
        auto value = p.mutable_data();
        auto& m = m_.at(path);
        auto& v = v_.at(path);
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
            v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            value[i] -= lr * mhat / (std::sqrt(vhat) + options_.epsilon);
        }
    }
    return true;
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
    double sq = 0.0;
    for (const auto& path : store.paths()) {
        const Tensor& p = store.get(path);
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (std::isfinite(norm) && norm > max_norm && max_norm > 0.0) {
        const double factor = max_norm / norm;
        for (const auto& path : store.paths()) {
            Tensor p = store.get(path);
            if (!p.has_grad()) continue;
            for (double& g : p.mutable_grad()) g *= factor;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------

EmaState::EmaState(const ParameterStore& store, double decay) : decay_(decay), shadow_(store.snapshot()) {
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("EMA decay must lie in [0, 1)");
}

void EmaState::update(const ParameterStore& store) {
    if (store.size() != shadow_.size()) throw std::invalid_argument("EMA: parameter set changed");
    for (const auto& path : store.paths()) {
        auto it = shadow_.find(path);
        if (it == shadow_.end()) throw std::invalid_argument("EMA: no shadow for parameter " + path);
        auto values = store.get(path).data();
        auto& shadow = it->second;
        if (shadow.size() != values.size()) throw std::invalid_argument("EMA: size mismatch for " + path);
        for (std::size_t i = 0; i < values.size(); ++i) shadow[i] = decay_ * shadow[i] + (1.0 - decay_) * values[i];
    }
}

void EmaState::swap_in(ParameterStore& store) {
    if (raw_) throw std::logic_error("EMA weights are already swapped in");
    raw_ = store.snapshot();
    store.restore(shadow_);
}

void EmaState::restore(ParameterStore& store) {
    if (!raw_) throw std::logic_error("EMA restore without swap_in");
    store.restore(*raw_);
    raw_.reset();
}

bool EarlyStopping::observe(double dev_accuracy) {
    ++epoch_;
    if (dev_accuracy > best_) {
        best_ = dev_accuracy;
        best_epoch_ = epoch_;
        epochs_since_improvement_ = 0;
    } else {
        ++epochs_since_improvement_;
    }
    return epochs_since_improvement_ >= patience_;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Schedule s) {
    switch (s) {
        case Schedule::automatic: return "auto";
        case Schedule::noam: return "noam";
        case Schedule::constant: return "constant";
    }
    return "?";
}

std::optional<Schedule> parse_schedule(std::string_view name) {
    for (auto s : {Schedule::automatic, Schedule::noam, Schedule::constant})
        if (name == to_string(s)) return s;
    return std::nullopt;
}

Schedule resolved_schedule(const TrainConfig& train, const ModelConfig& model) {
    if (train.schedule != Schedule::automatic) return train.schedule;
    return model.variant == Variant::base ? Schedule::constant : Schedule::noam;
}

namespace {

template <typename T>
void portable_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

std::string train_config_error(const TrainConfig& c) {
    if (c.epochs == 0) return "epochs must be positive";
    if (c.batch_size == 0) return "batch_size must be positive";
    if (!(c.learning_rate > 0.0) || !(c.lr_scale > 0.0)) return "learning rates must be positive";
    if (c.warmup == 0) return "warmup must be positive";
    if (!(c.ema_decay >= 0.0 && c.ema_decay < 1.0)) return "ema_decay must lie in [0, 1)";
    if (c.patience == 0) return "patience must be positive";
    return {};
}

}  // namespace

TrainResult train_loop(const ModelConfig& model_config, const TrainConfig& config, const Vocabulary& vocab,
                       const std::vector<Instance>& train, const std::vector<Instance>& dev, std::uint64_t seed,
                       const std::optional<std::filesystem::path>& out_dir, const TrainHooks& hooks) {
    if (auto err = train_config_error(config); !err.empty()) throw std::invalid_argument("invalid train config: " + err);
    if (train.empty()) throw std::invalid_argument("train_loop: empty training set");
    for (const auto& inst : train) {
        if (!answer_in_context(inst)) {
            throw std::invalid_argument("train_loop: training instance " + inst.id + " has no answer in its context");
        }
    }

    FlushDenormalsGuard flush;
    ModelConfig mc = model_config;
    mc.word_vocab = vocab.word_count();
    mc.char_vocab = vocab.char_count();
    auto model = std::make_shared<Model>(mc, seed);
    ParameterStore& params = model->parameters();
    Adam adam(params);
    EmaState ema(params, config.ema_decay);
    EarlyStopping stopper(config.patience);
    const Schedule schedule = resolved_schedule(config, mc);
    const BatchOptions batch_options = batch_options_for(mc, true);

    std::mt19937_64 order_rng(seed ^ 0x5eed5eed5eedULL);
    std::mt19937_64 dropout_rng(seed * 2 + 1);

    std::ofstream metrics;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        metrics.open(*out_dir / "metrics.jsonl");
        if (!metrics) throw std::runtime_error("cannot write " + (*out_dir / "metrics.jsonl").string());
    }
    auto emit = [&](const nlohmann::ordered_json& record) {
        if (metrics.is_open()) metrics << record.dump() << '\n';
    };

    TrainResult result;
    result.seed = seed;
    ParameterStore::Snapshot best_ema = params.snapshot();
    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= config.epochs && !result.aborted; ++epoch) {
        portable_shuffle(order, order_rng);
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            std::vector<const Instance*> rows;
            for (std::size_t i = begin; i < end; ++i) rows.push_back(&train[order[i]]);
            Batch batch = make_batch(rows, vocab, batch_options);

            params.zero_grad();
            ForwardContext ctx{true, &dropout_rng};
            std::vector<LossBreakdown> parts;
            const double inv = 1.0 / static_cast<double>(batch.size());
            for (std::size_t b = 0; b < batch.size(); ++b) {
                CombinedLoss loss;
                std::string failure;
                try {
                    InstanceOutput out = model->forward_instance(batch, b, ctx);
                    loss = model->instance_loss(batch, b, out);
                } catch (const std::invalid_argument& e) {
                    failure = e.what();
                } catch (const std::domain_error& e) {
                    failure = e.what();  // non-finite activations
                }
                if (!failure.empty()) {
                    Tape::current().clear();
                    result.aborted = true;
                    result.message = "step " + std::to_string(step + 1) + ", instance " + batch.ids[b] + ": " + failure;
                    break;
                }
                backward(scale(loss.total, inv));
                parts.push_back(loss.breakdown);
            }
            if (result.aborted) break;

            ++step;
            const double lr = schedule == Schedule::noam
                                  ? config.lr_scale * noam_lr({mc.d_model, config.warmup, step})
                                  : config.learning_rate;
            clip_grad_norm(params, config.clip_norm);
            if (!adam.step(params, lr)) {
                emit({{"type", "incident"}, {"step", step}, {"reason", "non-finite gradient; update skipped"}});
            }
            ema.update(params);

            LossBreakdown mean = mean_breakdown(parts);
            nlohmann::ordered_json rec{{"type", "step"}, {"step", step}, {"epoch", epoch},
                                       {"answer_loss", mean.answer_loss}};
            nlohmann::ordered_json aux = nlohmann::ordered_json::object();
            for (const auto& [name, v] : mean.supervision_losses) aux[name] = v;
            rec["supervision"] = aux;
            rec["total"] = mean.total;
            rec["lr"] = lr;
            emit(rec);
        }
        if (result.aborted) break;

        ema.swap_in(params);
        EvalOptions eval_options;
        eval_options.batch_size = config.eval_batch_size;
        const double accuracy = dev.empty() ? 0.0 : evaluate(*model, vocab, dev, eval_options).accuracy();
        if (hooks.on_epoch) hooks.on_epoch(epoch, *model);
        const bool stop = stopper.observe(accuracy);
        if (stopper.improved()) {
            best_ema = params.snapshot();
            if (out_dir) save_checkpoint(params, *out_dir / "best.ckpt");
        }
        ema.restore(params);
        if (stopper.improved() && out_dir) save_checkpoint(params, *out_dir / "raw.ckpt");

        result.dev_accuracies.push_back(accuracy);
        result.epochs_run = epoch;
        emit({{"type", "epoch"}, {"epoch", epoch}, {"dev_accuracy", accuracy}, {"stopped", stop}});
        if (stop) break;
    }
    if (result.aborted) emit({{"type", "abort"}, {"step", step}, {"reason", result.message}});

    result.best_epoch = stopper.best_epoch();
    result.best_dev_accuracy = std::max(0.0, stopper.best_accuracy());
    params.restore(best_ema);
    result.model = model;
    return result;
}

SeedSummary summarize_accuracies(const std::vector<double>& accuracies) {
    if (accuracies.empty()) throw std::invalid_argument("summarize_accuracies: no runs");
    SeedSummary s;
    s.runs = accuracies.size();
    s.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(s.runs);
    s.max = *std::max_element(accuracies.begin(), accuracies.end());
    double var = 0.0;
    for (double a : accuracies) var += (a - s.mean) * (a - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(s.runs));
    return s;
}

MultiSeedResult multi_seed(const ModelConfig& model_config, const TrainConfig& config, const Vocabulary& vocab,
                           const std::vector<Instance>& train, const std::vector<Instance>& dev,
                           const std::vector<std::uint64_t>& seeds, const std::optional<std::filesystem::path>& out_dir) {
    if (seeds.empty()) throw std::invalid_argument("multi_seed: at least one seed is required");
    MultiSeedResult out;
    std::vector<double> accuracies;
    for (auto seed : seeds) {
        std::optional<std::filesystem::path> dir;
        if (out_dir) dir = *out_dir / ("seed-" + std::to_string(seed));
        TrainResult run = train_loop(model_config, config, vocab, train, dev, seed, dir);
        if (run.aborted) {
            out.excluded.push_back(seed);
        } else {
            accuracies.push_back(run.best_dev_accuracy);
        }
        run.model.reset();  // keep memory flat across seeds
        out.runs.push_back(std::move(run));
    }
    if (!accuracies.empty()) out.summary = summarize_accuracies(accuracies);
    return out;
}

}  // namespace supattn
