#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "supattn/synth.hpp"
#include "supattn/train.hpp"

using namespace supattn;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(Variant variant) {
    ModelConfig c;
    c.variant = variant;
    c.word_dim = 8;
    c.char_dim = 4;
    c.char_filters = 4;
    c.char_width = 3;
    c.hidden = 4;
    c.modeling_layers = 1;
    c.early_layers = 2;
    c.heads = 2;
    c.d_model = 12;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("supattn_train_" + name);
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST_CASE("noam schedule") {
    const double peak = noam_lr({200, 8000, 8000});
    CHECK(std::abs(peak - 7.9057e-4) / 7.9057e-4 < 1e-4);
    CHECK(std::abs(peak - 1.0 / std::sqrt(200.0 * 8000.0)) < 1e-18);
    const double first = noam_lr({200, 8000, 1});
    CHECK(std::abs(first - 9.883e-8) / 9.883e-8 < 1e-3);
    CHECK(noam_lr({200, 8000, 7999}) < peak);
    CHECK(noam_lr({200, 8000, 8001}) < peak);
    CHECK_THROWS(noam_lr({200, 8000, 0}));
}

TEST_CASE("adam first step moves each coordinate by about lr") {
    ParameterStore store(1);
    auto w = store.create("w", {3}, Init::zeros);
    Adam adam(store);
    auto g = w.mutable_grad();
    g[0] = 0.3;
    g[1] = -2.0;
    g[2] = 0.0;
    CHECK(adam.step(store, 0.01));
    CHECK(w[0] == doctest::Approx(-0.01).epsilon(1e-5));
    CHECK(w[1] == doctest::Approx(0.01).epsilon(1e-5));
    CHECK(w[2] == 0.0);

    w.mutable_grad()[0] = std::nan("");
    const std::vector<double> before(w.data().begin(), w.data().end());
    CHECK_FALSE(adam.step(store, 0.01));
    CHECK(std::vector<double>(w.data().begin(), w.data().end()) == before);
}

TEST_CASE("gradient clipping") {
    ParameterStore store(1);
    auto w = store.create("w", {2}, Init::zeros);
    w.mutable_grad()[0] = 3.0;
    w.mutable_grad()[1] = 4.0;
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
    CHECK(w.grad()[0] == doctest::Approx(0.6));
    CHECK(w.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("ema") {
    ParameterStore store(1);
    auto w = store.create("w", {1}, Init::ones);
    EmaState ema(store, 0.9999);
    w.mutable_data()[0] = 0.0;
    ema.update(store);
    CHECK(ema.shadow().at("w")[0] == doctest::Approx(0.9999).epsilon(1e-15));

    // constant parameter: closed form w + (s0 - w) * decay^s, monotone
    ParameterStore s2(1);
    auto p = s2.create("p", {1}, Init::zeros);
    EmaState e2(s2, 0.9);
    p.mutable_data()[0] = 2.0;
    double last = 0.0;
    for (int s = 1; s <= 100; ++s) {
        e2.update(s2);
        const double v = e2.shadow().at("p")[0];
        CHECK(std::abs(v - (2.0 + (0.0 - 2.0) * std::pow(0.9, s))) < 1e-12);
        CHECK(v >= last);
        last = v;
    }

    e2.swap_in(s2);
    CHECK(p[0] == e2.shadow().at("p")[0]);
    CHECK_THROWS(e2.swap_in(s2));
    e2.restore(s2);
    CHECK(p[0] == 2.0);
    CHECK_THROWS(e2.restore(s2));

    ParameterStore other(1);
    other.create("q", {1}, Init::zeros);
    CHECK_THROWS(e2.update(other));
}

TEST_CASE("early stopping") {
    EarlyStopping stop(2);
    CHECK_FALSE(stop.observe(0.5));
    CHECK_FALSE(stop.observe(0.6));
    CHECK_FALSE(stop.observe(0.6));
    CHECK(stop.observe(0.6));
    CHECK(stop.best_epoch() == 2);
}

TEST_CASE("seed summary") {
    auto s = summarize_accuracies({0.60, 0.62, 0.61, 0.61});
    CHECK(s.mean == doctest::Approx(0.61).epsilon(1e-12));
    CHECK(s.max == 0.62);
    auto one = summarize_accuracies({0.7});
    CHECK(one.mean == one.max);
    CHECK(summarize_accuracies({0.5, 0.5, 0.5}).stddev == 0.0);
    CHECK_THROWS(summarize_accuracies({}));
}

TEST_CASE("schedule resolution") {
    TrainConfig t;
    CHECK(resolved_schedule(t, tiny(Variant::base)) == Schedule::constant);
    CHECK(resolved_schedule(t, tiny(Variant::early)) == Schedule::noam);
    t.schedule = Schedule::constant;
    CHECK(resolved_schedule(t, tiny(Variant::late)) == Schedule::constant);
    CHECK(parse_schedule("noam") == Schedule::noam);
    CHECK_FALSE(parse_schedule("cosine").has_value());
}

TEST_CASE("training writes metrics and is deterministic") {
    auto train = synth_generate(12, 1);
    auto dev = synth_generate(6, 2);
    auto vocab = Vocabulary::build(train, 1);
    auto mc = tiny(Variant::early);
    mc.supervision = {default_assignment(mc, SupervisionKind::coref_all)};
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.warmup = 10;
    tc.patience = 5;
    auto a = temp_dir("a"), b = temp_dir("b");
    auto ra = train_loop(mc, tc, vocab, train, dev, 3, a);
    auto rb = train_loop(mc, tc, vocab, train, dev, 3, b);
    CHECK_FALSE(ra.aborted);
    CHECK(ra.epochs_run == 2);
    CHECK(ra.dev_accuracies.size() == 2);

    std::size_t epochs = 0, steps = 0;
    std::ifstream in(a / "metrics.jsonl");
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line);
        if (j["type"] == "epoch") {
            ++epochs;
            CHECK(j.contains("dev_accuracy"));
        }
        if (j["type"] == "step") {
            ++steps;
            CHECK(j["supervision"].contains("CorefAll"));
            const double expected = noam_lr({mc.d_model, tc.warmup, j["step"].get<std::size_t>()}) * tc.lr_scale;
            CHECK(j["lr"].get<double>() == doctest::Approx(expected).epsilon(1e-15));
        }
    }
    CHECK(epochs == 2);
    CHECK(steps == 6);
    CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
    CHECK(fs::exists(a / "best.ckpt"));
    CHECK(fs::exists(a / "raw.ckpt"));
    CHECK(ra.model->parameters().snapshot() == rb.model->parameters().snapshot());
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("one small step lowers the loss on a frozen batch") {
    auto data = synth_generate(4, 8);
    auto vocab = Vocabulary::build(data, 1);
    auto mc = tiny(Variant::early);
    mc.dropout = 0.0;
    mc.word_vocab = vocab.word_count();
    mc.char_vocab = vocab.char_count();
    mc.supervision = {default_assignment(mc, SupervisionKind::coref_all)};
    Model model(mc, 4);
    Batch batch = make_batch(data, vocab, batch_options_for(mc, true));
    auto loss = [&] {
        double total = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            auto out = model.forward_instance(batch, b, {});
            auto l = model.instance_loss(batch, b, out).total;
            total += l.item();
            backward(scale(l, 1.0 / static_cast<double>(batch.size())));
        }
        return total;
    };
    model.parameters().zero_grad();
    const double before = loss();
    Adam adam(model.parameters());
    REQUIRE(adam.step(model.parameters(), 1e-4));
    model.parameters().zero_grad();
    CHECK(loss() < before);
}

TEST_CASE("a diverging run aborts and keeps its last good checkpoint") {
    auto train = synth_generate(8, 1);
    auto vocab = Vocabulary::build(train, 1);
    auto mc = tiny(Variant::base);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 4;
    tc.schedule = Schedule::constant;
    tc.learning_rate = 1e300;
    tc.patience = 10;
    auto dir = temp_dir("abort");
    auto r = train_loop(mc, tc, vocab, train, train, 1, dir);
    CHECK(r.aborted);
    CHECK_FALSE(r.message.empty());
    CHECK(slurp(dir / "metrics.jsonl").find("\"abort\"") != std::string::npos);
    fs::remove_all(dir);

    auto runs = multi_seed(mc, tc, vocab, train, train, {1, 2});
    CHECK(runs.excluded.size() == 2);
}

TEST_CASE("multi-seed summary") {
    auto train = synth_generate(8, 1);
    auto vocab = Vocabulary::build(train, 1);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 8;
    auto dir = temp_dir("multi");
    auto r = multi_seed(tiny(Variant::base), tc, vocab, train, train, {1, 2}, dir);
    CHECK(r.runs.size() == 2);
    CHECK(r.excluded.empty());
    CHECK(r.summary.runs == 2);
    CHECK(fs::exists(dir / "seed-1" / "metrics.jsonl"));
    CHECK(fs::exists(dir / "seed-2" / "metrics.jsonl"));
    fs::remove_all(dir);
}
