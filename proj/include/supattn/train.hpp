#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "supattn/data.hpp"
#include "supattn/layers.hpp"
#include "supattn/model.hpp"

namespace supattn {

struct SchedulerState {
    std::size_t d_model = 200;
    std::size_t warmup = 8000;
    std::size_t step = 1;
};

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step 0 is rejected.
double noam_lr(const SchedulerState& state);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
public:
    explicit Adam(const ParameterStore& store, AdamOptions options = {});

    // Applies one bias-corrected step from the stored gradients. Returns false
    // and leaves everything untouched when any gradient is non-finite.
    bool step(ParameterStore& store, double lr);
    std::size_t steps() const { return t_; }

private:
    AdamOptions options_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// Rescales gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

class EmaState {
public:
    EmaState(const ParameterStore& store, double decay);

    // shadow <- decay * shadow + (1 - decay) * param
    void update(const ParameterStore& store);
    double decay() const { return decay_; }
    const ParameterStore::Snapshot& shadow() const { return shadow_; }

    // Loads the shadow into the store, keeping the raw values for restore().
    void swap_in(ParameterStore& store);
    void restore(ParameterStore& store);

private:
    double decay_;
    ParameterStore::Snapshot shadow_;
    std::optional<ParameterStore::Snapshot> raw_;
};

// Stops once dev accuracy has failed to improve for `patience` consecutive
// epochs; tracks the best epoch (1-based).
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience = 2) : patience_(patience) {}
    // Returns true when training should stop after this epoch.
    bool observe(double dev_accuracy);
    bool improved() const { return epochs_since_improvement_ == 0; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_accuracy() const { return best_; }
    std::size_t epochs_since_improvement() const { return epochs_since_improvement_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = -1.0;
    std::size_t epochs_since_improvement_ = 0;
};

enum class Schedule { automatic, noam, constant };

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    Schedule schedule = Schedule::automatic;  // noam for self-attention variants, constant for base
    double learning_rate = 0.001;             // constant schedule
    std::size_t warmup = 8000;
    double lr_scale = 1.0;                    // multiplies the noam rate
    double ema_decay = 0.9999;
    double clip_norm = 5.0;
    std::size_t patience = 2;
    std::size_t min_count = 1;
    std::size_t eval_batch_size = 32;

    bool operator==(const TrainConfig&) const = default;
};

std::string_view to_string(Schedule s);
std::optional<Schedule> parse_schedule(std::string_view name);

// The schedule actually used for a model config.
Schedule resolved_schedule(const TrainConfig& train, const ModelConfig& model);

struct TrainResult {
    std::uint64_t seed = 0;
    bool aborted = false;
    std::string message;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_dev_accuracy = 0.0;
    std::vector<double> dev_accuracies;
    std::shared_ptr<Model> model;  // best-epoch EMA weights loaded
};

struct TrainHooks {
    // Called after each epoch with the EMA weights swapped in.
    std::function<void(std::size_t epoch, const Model&)> on_epoch;
};

// Trains one run. When out_dir is set, writes metrics.jsonl, best.ckpt (EMA
// weights of the best epoch) and raw.ckpt (raw weights of the same epoch).
TrainResult train_loop(const ModelConfig& model_config, const TrainConfig& config, const Vocabulary& vocab,
                       const std::vector<Instance>& train, const std::vector<Instance>& dev, std::uint64_t seed,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt, const TrainHooks& hooks = {});

struct SeedSummary {
    std::size_t runs = 0;
    double mean = 0.0;
    double max = 0.0;
    double stddev = 0.0;  // population
};

SeedSummary summarize_accuracies(const std::vector<double>& accuracies);

struct MultiSeedResult {
    std::vector<TrainResult> runs;
    std::vector<std::uint64_t> excluded;  // seeds whose run aborted
    SeedSummary summary;
};

// Runs train_loop per seed, writing each under out_dir/seed-N when given.
MultiSeedResult multi_seed(const ModelConfig& model_config, const TrainConfig& config, const Vocabulary& vocab,
                           const std::vector<Instance>& train, const std::vector<Instance>& dev,
                           const std::vector<std::uint64_t>& seeds,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace supattn
