// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "supattn/decode.hpp"
#include "supattn/objective.hpp"
#include "supattn/supervision.hpp"
#include "supattn/synth.hpp"
#include "supattn/train.hpp"

using namespace supattn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool grad = true, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), grad);
}

std::vector<Tensor> store_leaves(const ParameterStore& store, std::vector<Tensor> extra = {}) {
    for (const auto& p : store.paths()) extra.push_back(store.get(p));
    return extra;
}

SupervisionMatrix random_targets(std::mt19937_64& rng, std::size_t n) {
    SupervisionMatrix s;
    s.rows.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (rng() % 3 == 0) s.rows[i].push_back(j);
    // A row covering every column has loss -log(1) for any input: its gradient
    // is identically zero and a relative error there only measures rounding.
    for (auto& row : s.rows)
        if (row.size() == n) row.pop_back();
    if (s.k() == 0) s.rows[0].push_back(n - 1);
    return s;
}

// ---------------------------------------------------------------------------
// Gradient suite

Outcome gradient_suite() {
    constexpr int kInputs = 20;
    struct Case {
        std::string name;
        std::function<double(std::mt19937_64&, std::uint64_t)> run;  // returns max relative error
    };
    const auto probe_sum = [](const Tensor& y, const Tensor& probe) { return sum_all(mul(y, probe)); };

    std::vector<Case> cases{
        {"linear",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             Linear layer(s, "l", 4, 3);
             auto x = random_tensor(rng, {5, 4});
             auto probe = random_tensor(rng, {5, 3}, false);
             return gradient_check([&] { return probe_sum(layer(x), probe); }, store_leaves(s, {x})).max_relative_error;
         }},
        {"embedding",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             Embedding emb(s, "e", 7, 3, 0);
             std::vector<std::size_t> ids;
             for (int i = 0; i < 6; ++i) ids.push_back(rng() % 7);
             auto probe = random_tensor(rng, {6, 3}, false);
             return gradient_check([&] { return probe_sum(emb(ids), probe); }, store_leaves(s)).max_relative_error;
         }},
        {"char_cnn",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             CharCnn cnn(s, "c", 6, 3, 4, 3, 1);
             std::vector<std::vector<std::size_t>> chars;
             for (int t = 0; t < 4; ++t) {
                 chars.emplace_back();
                 for (std::size_t k = 0, len = 1 + rng() % 5; k < len; ++k) chars.back().push_back(2 + rng() % 4);
             }
             auto probe = random_tensor(rng, {4, 4}, false);
             return gradient_check([&] { return probe_sum(cnn(chars), probe); }, store_leaves(s)).max_relative_error;
         }},
        {"bigru",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             BiGru gru(s, "g", 3, 2, 2);
             auto x = random_tensor(rng, {4, 3});
             auto probe = random_tensor(rng, {4, 4}, false);
             return gradient_check([&] { return probe_sum(gru(x, 0.0, {}), probe); }, store_leaves(s, {x}))
                 .max_relative_error;
         }},
        {"layer_norm",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             LayerNorm norm(s, "n", 5);
             for (const auto& p : s.paths()) {
                 Tensor t = s.get(p);
                 for (auto& v : t.mutable_data()) v += std::normal_distribution<double>(0.0, 0.5)(rng);
             }
             auto x = random_tensor(rng, {3, 5});
             auto probe = random_tensor(rng, {3, 5}, false);
             return gradient_check([&] { return probe_sum(norm(x), probe); }, store_leaves(s, {x})).max_relative_error;
         }},
        {"feed_forward",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             FeedForward ff(s, "f", 4, 6);
             auto x = random_tensor(rng, {3, 4});
             auto probe = random_tensor(rng, {3, 4}, false);
             return gradient_check([&] { return probe_sum(ff(x, 0.0, {}), probe); }, store_leaves(s, {x}))
                 .max_relative_error;
         }},
        {"self_attention",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ParameterStore s(seed);
             SelfAttentionLayer layer(s, "a", 6, 8, 2, 10);
             auto x = random_tensor(rng, {4, 6});
             auto probe = random_tensor(rng, {4, 6}, false);
             std::vector<double> window(16, 1.0);
             window[2] = window[8] = 0.0;
             std::vector<Tensor> masks{Tensor::full({4, 4}, 1.0), Tensor::from({4, 4}, window)};
             return gradient_check([&] { return probe_sum(layer(x, masks, 0.0, {}).output, probe); },
                                   store_leaves(s, {x}))
                 .max_relative_error;
         }},
        {"attention_flow",
         [&](std::mt19937_64& rng, std::uint64_t seed) {
             ModelConfig c;
             c.variant = Variant::base;
             c.word_dim = 4;
             c.char_dim = 2;
             c.char_filters = 2;
             c.char_width = 2;
             c.hidden = 2;
             c.modeling_layers = 1;
             c.word_vocab = 8;
             c.char_vocab = 6;
             Model model(c, seed);
             auto h = random_tensor(rng, {4, 4});
             auto u = random_tensor(rng, {2 + rng() % 2, 4});
             auto probe = random_tensor(rng, {4, 16}, false);
             std::vector<Tensor> leaves{h, u};
             for (const auto& p : model.parameters().paths())
                 if (p.rfind("flow.", 0) == 0) leaves.push_back(model.parameters().get(p));
             return gradient_check([&] { return probe_sum(model.attention_flow(h, u), probe); }, leaves)
                 .max_relative_error;
         }},
        {"answer_loss",
         [&](std::mt19937_64& rng, std::uint64_t) {
             const std::size_t n = 2 + rng() % 7;
             auto logits = random_tensor(rng, {n});
             std::vector<std::size_t> pos{rng() % n};
             if (rng() % 2) pos.push_back((pos[0] + 1 + rng() % (n - 1)) % n);
             std::sort(pos.begin(), pos.end());
             return gradient_check(
                        [&] { return answer_loss(masked_softmax(logits, Tensor::full({n}, 1.0)), pos); }, {logits})
                 .max_relative_error;
         }},
        {"supervision_loss",
         [&](std::mt19937_64& rng, std::uint64_t) {
             const std::size_t n = 2 + rng() % 7;
             auto logits = random_tensor(rng, {n, n});
             auto s = random_targets(rng, n);
             return gradient_check(
                        [&] { return supervision_loss(masked_softmax(logits, Tensor::full({n, n}, 1.0)), s); },
                        {logits})
                 .max_relative_error;
         }},
    };

    // The whole Early model with a supervised head, end to end through the
    // combined objective, on a handful of inputs.
    cases.push_back({"model_early_supervised", [&](std::mt19937_64& rng, std::uint64_t seed) {
                         auto data = synth_generate(1, seed);
                         auto& inst = data[0];
                         inst.context.resize(std::min<std::size_t>(inst.context.size(), 12));
                         inst.answer = inst.context[rng() % inst.context.size()];
                         inst.annotation = oracle::random_annotation(rng, inst.context.size());
                         auto vocab = Vocabulary::build(data, 1);
                         ModelConfig c;
                         c.variant = Variant::both;
                         c.word_dim = 4;
                         c.char_dim = 2;
                         c.char_filters = 2;
                         c.char_width = 2;
                         c.hidden = 2;
                         c.modeling_layers = 1;
                         c.early_layers = 2;
                         c.late_layers = 1;
                         c.heads = 2;
                         c.d_model = 6;
                         c.dropout = 0.0;
                         c.word_vocab = vocab.word_count();
                         c.char_vocab = vocab.char_count();
                         c.supervision = {{SupervisionKind::coref_all, EncoderLocation::early, 1, 0},
                                          {SupervisionKind::dep_parse, EncoderLocation::late, 0, 1}};
                         c.lambda = 0.5;
                         Model model(c, seed);
                         Batch batch = make_batch(data, vocab, batch_options_for(c, false));
                         auto f = [&] {
                             auto out = model.forward_instance(batch, 0, {});
                             return model.instance_loss(batch, 0, out).total;
                         };
                         // Through a dozen stacked layers the smallest gradients sit near the
                         // rounding floor of a 1e-5 step; 1e-4 stays clear of it and of ReLU kinks.
                         return gradient_check(f, store_leaves(model.parameters()), 1e-4).max_relative_error;
                     }});

    double worst = 0.0;
    std::string worst_case;
    std::size_t checks = 0;
    for (const auto& c : cases) {
        const int inputs = c.name.rfind("model_", 0) == 0 ? 3 : kInputs;
        std::mt19937_64 rng(std::hash<std::string>{}(c.name) % 100000);
        for (int i = 0; i < inputs; ++i) {
            double e = c.run(rng, 100 + i);
            ++checks;
            if (!(e <= worst)) {
                worst = e;
                worst_case = c.name;
            }
        }
    }
    return {worst <= 1e-4, std::to_string(cases.size()) + " cases, " + std::to_string(checks) +
                               " checks, worst relative error " + fmt("%.2e", worst) + " (" + worst_case + ")"};
}

// ---------------------------------------------------------------------------

Outcome supervision_loss_oracle() {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> dist(0.0, 2.0);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng() % 8;
        std::vector<double> logits(n * n);
        for (auto& v : logits) v = dist(rng);
        auto att = masked_softmax(Tensor::from({n, n}, logits), Tensor::full({n, n}, 1.0));
        std::vector<std::vector<double>> a(n, std::vector<double>(n));
        oracle::Matrix s = oracle::zeros(n);
        SupervisionMatrix m;
        m.rows.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                a[i][j] = att.at(i, j);
                if (rng() % 3 == 0) {
                    s[i][j] = 1;
                    m.rows[i].push_back(j);
                }
            }
        worst = std::max(worst, std::abs(supervision_loss(att, m).item() - oracle::supervision_loss(a, s)));
    }
    auto hand = Tensor::from({3, 3}, {0.5, 0.25, 0.25, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.1, 0.2, 0.7});
    SupervisionMatrix hs;
    hs.rows = {{0, 2}, {}, {}};
    const double h = supervision_loss(hand, hs).item();
    const double expected = -2.0 * std::log(0.75);
    const bool ok = worst <= 1e-10 && std::abs(h - expected) <= 1e-10 && std::abs(h - 0.57536) < 5e-6;
    return {ok, "1000 pairs, worst deviation " + fmt("%.1e", worst) + ", hand value " + fmt("%.5f", h)};
}

Outcome answer_loss_values() {
    auto probs = Tensor::from({3}, {0.2, 0.3, 0.5});
    std::vector<std::size_t> both{0, 2}, first{0};
    const double a = answer_loss(probs, both).item();
    const double b = answer_loss(Tensor::full({4}, 0.25), first).item();
    const bool ok = std::abs(a - -std::log(0.7)) <= 1e-9 && std::abs(a - 0.35667) < 5e-6 &&
                    std::abs(b - -std::log(0.25)) <= 1e-9 && std::abs(b - 1.38629) < 5e-6;
    return {ok, fmt("%.5f", a) + " and " + fmt("%.5f", b)};
}

oracle::Matrix as_matrix(const SupervisionMatrix& m) {
    oracle::Matrix out = oracle::zeros(m.size());
    for (std::size_t i = 0; i < m.size(); ++i)
        for (auto j : m.rows[i]) out[i][j] = 1;
    return out;
}

Outcome builders() {
    std::mt19937_64 rng(500);
    std::size_t mismatches = 0, nonlocal = 0, asymmetric = 0, arcs = 0;
    for (int t = 0; t < 500; ++t) {
        auto a = oracle::random_annotation(rng, 1 + rng() % 12);
        auto dep = build_depparse(a);
        auto all = build_corefall(a);
        auto narrative = build_narrative(a);
        mismatches += as_matrix(dep) != oracle::depparse(a);
        mismatches += as_matrix(all) != oracle::corefall(a);
        mismatches += as_matrix(build_corefprev(a)) != oracle::coref_neighbour(a, true);
        mismatches += as_matrix(build_corefnext(a)) != oracle::coref_neighbour(a, false);
        mismatches += as_matrix(narrative) != oracle::narrative(a);
        for (std::size_t i = 0; i < dep.size(); ++i)
            for (auto j : dep.rows[i]) {
                ++arcs;
                nonlocal += sentence_of(a, i) != sentence_of(a, j);
            }
        asymmetric += !all.symmetric();
        asymmetric += !narrative.symmetric();
    }
    return {mismatches == 0 && nonlocal == 0 && asymmetric == 0,
            "500 annotations, " + std::to_string(mismatches) + " mismatches, " + std::to_string(nonlocal) + "/" +
                std::to_string(arcs) + " cross-sentence arcs, " + std::to_string(asymmetric) + " asymmetric"};
}

Outcome decode_oracle() {
    std::mt19937_64 rng(1000);
    const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
    std::size_t wrong = 0, ties = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng() % 12;
        std::vector<std::string> tokens;
        std::vector<double> probs;
        const bool constructed_tie = t % 3 == 0;
        for (std::size_t i = 0; i < n; ++i) {
            tokens.push_back(words[rng() % words.size()]);
            probs.push_back(constructed_tie ? static_cast<double>(1 + rng() % 3) : static_cast<double>(rng() % 1000));
        }
        double total = 0.0;
        for (double p : probs) total += p;
        if (total == 0.0) probs.assign(n, 1.0), total = static_cast<double>(n);
        // Powers of two keep every partial sum exact, so constructed ties stay ties.
        if (constructed_tie) {
            double scale = 1.0;
            while (scale < total) scale *= 2.0;
            for (auto& p : probs) p /= scale;
        } else {
            for (auto& p : probs) p /= total;
        }
        auto expected = oracle::decode(probs, tokens);
        auto got = pointer_sum_decode(probs, tokens);
        wrong += got.predicted_word != expected.word || got.summed_prob != expected.prob;
        std::size_t at_max = 0;
        for (const auto& [word, p] : got.per_type_probs) at_max += p == got.summed_prob;
        ties += at_max > 1;
    }
    return {wrong == 0, "1000 distributions (" + std::to_string(ties) + " with tied types), " + std::to_string(wrong) +
                            " disagreements"};
}

Outcome scheduler() {
    const double peak = noam_lr({200, 8000, 8000});
    const double first = noam_lr({200, 8000, 1});
    const double peak_exact = std::pow(200.0, -0.5) * std::pow(8000.0, -0.5);
    const double first_exact = std::pow(200.0, -0.5) * 1.0 * std::pow(8000.0, -1.5);
    // The quoted figures are short roundings of the closed form: the peak
    // rounds to 7.9057e-4, the first step is 9.8821e-8, which the quoted
    // 9.883e-8 misses in the fourth digit. Both are held to 1e-4 relative.
    const auto near = [](double v, double quoted) { return std::abs(v - quoted) <= 1e-4 * quoted; };
    const bool closed = std::abs(peak - peak_exact) <= 1e-7 * peak_exact &&
                        std::abs(first - first_exact) <= 1e-7 * first_exact;
    const bool quoted = near(peak, 7.9057e-4) && near(first, 9.883e-8);

    ParameterStore store(1);
    auto p = store.create("p", {3}, Init::zeros);
    EmaState ema(store, 0.99);
    const std::vector<double> target{1.5, -2.0, 0.25};
    std::copy(target.begin(), target.end(), p.mutable_data().begin());
    double worst = 0.0;
    for (int s = 1; s <= 100; ++s) {
        ema.update(store);
        for (std::size_t k = 0; k < 3; ++k)
            worst = std::max(worst, std::abs(ema.shadow().at("p")[k] - target[k] * (1.0 - std::pow(0.99, s))));
    }
    return {closed && quoted && worst <= 1e-12,
            "peak " + fmt("%.6e", peak) + ", first " + fmt("%.6e", first) + " (closed form within 1e-7; quoted 9.883e-8 off by " +
                fmt("%.1e", std::abs(first - 9.883e-8) / 9.883e-8) + " relative), EMA worst deviation " + fmt("%.1e", worst)};
}

// ---------------------------------------------------------------------------
// Synthetic experiment

ModelConfig experiment_model(bool supervised) {
    ModelConfig c;
    c.variant = Variant::early;
    c.word_dim = 48;
    c.char_filters = 16;
    c.hidden = 32;
    c.d_model = 64;
    c.early_layers = 2;
    c.heads = 4;
    c.dropout = 0.1;
    c.lambda = 0.3;
    if (supervised) c.supervision = {default_assignment(c, SupervisionKind::coref_all)};
    return c;
}

TrainConfig experiment_training() {
    TrainConfig t;
    t.epochs = 6;
    t.patience = t.epochs;
    t.batch_size = 16;
    t.warmup = 400;
    t.ema_decay = 0.99;
    return t;
}

struct ExperimentResult {
    Outcome accuracy, mass;
};

ExperimentResult experiment(const fs::path& work) {
    const auto t0 = Clock::now();
    auto train = synth_generate(2000, 1);
    auto dev = synth_generate(400, 2);
    auto vocab = Vocabulary::build(train, 1);
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    const TrainConfig tc = experiment_training();

    double acc[2] = {0.0, 0.0};
    double init_mass = 0.0, final_mass = 0.0;
    std::string per_seed[2];
    std::size_t aborted = 0;
    for (int sup = 0; sup < 2; ++sup) {
        ModelConfig mc = experiment_model(sup == 1);
        mc.word_vocab = vocab.word_count();
        mc.char_vocab = vocab.char_count();
        for (auto seed : seeds) {
            double last_mass = 0.0;
            TrainHooks hooks;
            if (sup) {
                init_mass += mean_target_mass(Model(mc, seed), vocab, dev);
                hooks.on_epoch = [&](std::size_t, const Model& m) { last_mass = mean_target_mass(m, vocab, dev); };
            }
            auto r = train_loop(mc, tc, vocab, train, dev, seed,
                                work / (sup ? "supervised" : "unsupervised") / ("seed-" + std::to_string(seed)), hooks);
            aborted += r.aborted;
            acc[sup] += r.best_dev_accuracy;
            final_mass += last_mass;
            per_seed[sup] += (per_seed[sup].empty() ? "" : "/") + fmt("%.4f", r.best_dev_accuracy);
            std::printf("  %s seed %llu: best dev accuracy %.4f at epoch %zu%s (%.0fs)\n",
                        sup ? "supervised" : "unsupervised", static_cast<unsigned long long>(seed),
                        r.best_dev_accuracy, r.best_epoch, sup ? (", mass " + fmt("%.3f", last_mass)).c_str() : "",
                        seconds_since(t0));
            std::fflush(stdout);
        }
    }
    const double n = static_cast<double>(seeds.size());
    acc[0] /= n;
    acc[1] /= n;
    init_mass /= n;
    final_mass /= n;
    const double elapsed = seconds_since(t0);
    const bool in_budget = elapsed < 1800.0;
    ExperimentResult out;
    out.accuracy = {aborted == 0 && acc[1] >= acc[0] && in_budget,
                    "supervised mean " + fmt("%.4f", acc[1]) + " (" + per_seed[1] + ") vs unsupervised " +
                        fmt("%.4f", acc[0]) + " (" + per_seed[0] + "), " + fmt("%.0f", elapsed) + "s"};
    out.mass = {aborted == 0 && final_mass >= 0.5 && init_mass <= 0.2,
                "target mass " + fmt("%.3f", init_mass) + " at init, " + fmt("%.3f", final_mass) + " after training"};
    return out;
}

Outcome determinism(const fs::path& work) {
    auto train = synth_generate(200, 11);
    auto dev = synth_generate(50, 12);
    auto vocab = Vocabulary::build(train, 1);
    ModelConfig mc = experiment_model(true);
    mc.word_dim = 16;
    mc.char_filters = 8;
    mc.hidden = 8;
    mc.d_model = 24;
    mc.word_vocab = vocab.word_count();
    mc.char_vocab = vocab.char_count();
    TrainConfig tc = experiment_training();
    tc.epochs = 2;
    const fs::path a = work / "determinism-a", b = work / "determinism-b";
    fs::remove_all(a);
    fs::remove_all(b);
    train_loop(mc, tc, vocab, train, dev, 5, a);
    train_loop(mc, tc, vocab, train, dev, 5, b);
    const std::string ma = slurp(a / "metrics.jsonl"), mb = slurp(b / "metrics.jsonl");
    const bool ckpt = slurp(a / "best.ckpt") == slurp(b / "best.ckpt");
    return {!ma.empty() && ma == mb && ckpt,
            std::to_string(ma.size()) + " bytes of metrics, " + (ma == mb ? "identical" : "different") +
                ", checkpoints " + (ckpt ? "identical" : "different")};
}

// ---------------------------------------------------------------------------
// CLI smoke

Outcome cli_smoke(const fs::path& cli, const fs::path& work) {
    const auto t0 = Clock::now();
    const fs::path dir = work / "cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<std::string> failures;
    const auto run = [&](const std::string& args) {
        const std::string cmd = "\"" + cli.string() + "\" " + args + " > \"" + (dir / "log.txt").string() + "\" 2>&1";
        if (std::system(cmd.c_str()) != 0) failures.push_back(args.substr(0, args.find(' ')));
    };
    const auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };

    json config{{"model",
                 {{"variant", "early"},
                  {"word_dim", 16},
                  {"char_filters", 8},
                  {"hidden", 8},
                  {"d_model", 24},
                  {"early_layers", 2},
                  {"heads", 4},
                  {"supervision", {"CorefAll"}}}},
                {"train", {{"epochs", 2}, {"batch_size", 16}, {"warmup", 50}, {"ema_decay", 0.99}}}};
    std::ofstream(dir / "config.json") << config.dump(2) << '\n';

    run("synth --count 300 --seed 1 --out " + q(dir / "train.jsonl"));
    run("synth --count 60 --seed 2 --out " + q(dir / "dev.jsonl"));
    run("validate " + q(dir / "train.jsonl"));
    run("build-supervision --input " + q(dir / "dev.jsonl") + " --type corefall,depparse,narrative --out " +
        q(dir / "supervision.jsonl"));
    run("train --config " + q(dir / "config.json") + " --train " + q(dir / "train.jsonl") + " --dev " +
        q(dir / "dev.jsonl") + " --seeds 1 --out " + q(dir / "run"));
    run("eval --run " + q(dir / "run") + " --data " + q(dir / "dev.jsonl") + " --subsets pos --out " +
        q(dir / "eval"));
    std::string first_id;
    if (auto load = load_corpus(dir / "dev.jsonl"); !load.instances.empty()) first_id = load.instances[0].id;
    run("inspect-attention --run " + q(dir / "run") + " --data " + q(dir / "dev.jsonl") + " --id " + first_id +
        " --out " + q(dir / "attention.json"));

    // Invariants on the artifacts.
    std::vector<std::string> broken;
    try {
        std::ifstream sup(dir / "supervision.jsonl");
        std::size_t records = 0;
        for (std::string line; std::getline(sup, line); ++records) {
            auto r = json::parse(line);
            std::size_t nonempty = 0;
            for (const auto& row : r["rows"]) {
                nonempty += !row.empty();
                for (const auto& j : row)
                    if (j.get<std::size_t>() >= r["n"].get<std::size_t>()) broken.push_back("supervision index");
            }
            if (nonempty != r["k"].get<std::size_t>()) broken.push_back("supervision k");
        }
        if (records != 180) broken.push_back("supervision record count " + std::to_string(records));

        auto train_summary = json::parse(slurp(dir / "run" / "summary.json"));
        if (train_summary["runs"].size() != 1 || train_summary["runs"][0]["aborted"].get<bool>() ||
            train_summary["runs"][0]["epochs_run"].get<std::size_t>() != 2)
            broken.push_back("train summary");

        auto eval_summary = json::parse(slurp(dir / "eval" / "summary.json"));
        const double accuracy = eval_summary["accuracy"].get<double>();
        if (eval_summary["count"].get<std::size_t>() != 60 || accuracy < 0.0 || accuracy > 1.0)
            broken.push_back("eval summary");

        auto dump = json::parse(slurp(dir / "attention.json"));
        bool supervised_head = false;
        for (const auto& h : dump["heads"]) {
            for (const auto& row : h["matrix"]) {
                double total = 0.0;
                for (const auto& v : row) total += v.get<double>();
                if (std::abs(total - 1.0) > 1e-9) broken.push_back("attention row sum");
            }
            if (!h["supervision"].is_null()) supervised_head = true;
        }
        if (dump["heads"].size() != 8 || !supervised_head) broken.push_back("attention heads");
    } catch (const std::exception& e) {
        broken.push_back(std::string("artifact: ") + e.what());
    }

    const double elapsed = seconds_since(t0);
    std::string detail = "7 commands, " + std::to_string(failures.size()) + " failed";
    for (const auto& f : failures) detail += " [" + f + "]";
    detail += ", " + std::to_string(broken.size()) + " broken invariants";
    for (const auto& b : broken) detail += " [" + b + "]";
    detail += ", " + fmt("%.0f", elapsed) + "s";
    return {failures.empty() && broken.empty() && elapsed < 600.0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string cli_path = SUPATTN_CLI_PATH;
    std::string work = (fs::temp_directory_path() / "supattn_acceptance").string();
    std::vector<std::string> only;
    std::string report_path;
    app.add_option("--cli", cli_path, "Path to the command-line tool")->capture_default_str();
    app.add_option("--work", work, "Scratch directory")->capture_default_str();
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--report", report_path, "Also write the result lines to this file");
    CLI11_PARSE(app, argc, argv);

    const auto wanted = [&](const std::string& name) {
        return only.empty() || std::find(only.begin(), only.end(), name) != only.end();
    };
    fs::create_directories(work);

    int failed = 0;
    std::ofstream report_file;
    if (!report_path.empty()) report_file.open(report_path);
    const auto report = [&](const std::string& name, const Outcome& o, double secs) {
        char line[1024];
        std::snprintf(line, sizeof line, "%s %-22s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(),
                      o.detail.c_str(), secs);
        std::fputs(line, stdout);
        std::fflush(stdout);
        if (report_file) report_file << line << std::flush;
        failed += !o.pass;
    };
    const auto check = [&](const std::string& name, const std::function<Outcome()>& fn) {
        if (!wanted(name)) return;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        report(name, o, seconds_since(t0));
    };

    check("gradients", [] {
        const auto t0 = Clock::now();
        Outcome o = gradient_suite();
        const double s = seconds_since(t0);
        o.pass = o.pass && s < 120.0;
        return o;
    });
    check("supervision-loss", supervision_loss_oracle);
    check("answer-loss", answer_loss_values);
    check("builders", builders);
    check("decode", decode_oracle);
    check("scheduler", scheduler);
    check("determinism", [&] { return determinism(work); });
    check("cli-smoke", [&] { return cli_smoke(cli_path, work); });
    if (wanted("experiment-accuracy") || wanted("experiment-mass")) {
        const auto t0 = Clock::now();
        ExperimentResult r;
        try {
            r = experiment(fs::path(work) / "experiment");
        } catch (const std::exception& e) {
            r.accuracy = r.mass = {false, std::string("exception: ") + e.what()};
        }
        const double s = seconds_since(t0);
        if (wanted("experiment-accuracy")) report("experiment-accuracy", r.accuracy, s);
        if (wanted("experiment-mass")) report("experiment-mass", r.mass, s);
    }
    std::printf("%s: %d criterion(s) failed\n", failed ? "FAILED" : "OK", failed);
    if (report_file) report_file << (failed ? "FAILED: " : "OK: ") << failed << " criterion(s) failed\n";
    return failed ? 1 : 0;
}
