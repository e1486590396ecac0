#include <cmath>
#include <random>

#include "doctest.h"
#include "supattn/model.hpp"
#include "supattn/synth.hpp"

using namespace supattn;

namespace {

ModelConfig small(Variant variant) {
    ModelConfig c;
    c.variant = variant;
    c.word_dim = 10;
    c.char_dim = 4;
    c.char_filters = 6;
    c.char_width = 3;
    c.hidden = 5;
    c.modeling_layers = 2;
    c.early_layers = 4;
    c.late_layers = 1;
    c.heads = 4;
    c.d_model = 16;
    c.dropout = 0.1;
    return c;
}

// Contexts of length 10 and 7 with 4-token queries.
std::vector<Instance> two_instances() {
    auto data = synth_generate(2, 31);
    data[0].context.resize(10);
    data[1].context.resize(7);
    for (auto& d : data) {
        d.query.resize(4);
        d.annotation.reset();
        d.answer = d.context[0];
    }
    return data;
}

std::size_t gru_params(std::size_t in, std::size_t h) { return 2 * (in * 3 * h + h * 3 * h + 6 * h); }

std::size_t encoder_layer_params(std::size_t dim, std::size_t attn, std::size_t inner) {
    const std::size_t q = dim * attn + attn, k = dim * attn, v = dim * attn + attn, o = attn * dim + dim;
    const std::size_t ff = dim * inner + inner + inner * dim + dim;
    return q + k + v + o + ff + 4 * dim;
}

// Per-layer count: embeddings, char CNN, contextual stage, attention flow,
// optional late encoder, modeling GRUs and norm, output layer.
std::size_t expected_params(const ModelConfig& c) {
    std::size_t total = c.word_vocab * c.word_dim;
    total += c.char_vocab * c.char_dim + c.char_width * c.char_dim * c.char_filters + c.char_filters;
    const std::size_t e = c.word_dim + c.char_filters;
    std::size_t d = 2 * c.hidden;
    if (c.has_early()) {
        d = c.d_model;
        for (std::size_t l = 0; l < c.early_layers; ++l) total += encoder_layer_params(d, c.d_model, 4 * c.d_model);
    } else {
        total += gru_params(e, c.hidden);
    }
    total += 3 * d + 2 * 4 * d;
    if (c.has_late())
        for (std::size_t l = 0; l < c.late_layers; ++l) total += encoder_layer_params(4 * d, c.d_model, 4 * c.d_model);
    total += gru_params(4 * d, c.hidden);
    for (std::size_t l = 1; l < c.modeling_layers; ++l) total += gru_params(2 * c.hidden, c.hidden);
    total += 2 * c.hidden;
    total += 4 * d + 2 * c.hidden;
    return total;
}

}  // namespace

TEST_CASE("config validation") {
    auto c = small(Variant::early);
    c.word_vocab = 50;
    c.char_vocab = 20;
    CHECK(config_error(c).empty());
    auto bad = c;
    bad.d_model = 18;
    CHECK(config_error(bad).find("divisible") != std::string::npos);
    CHECK_THROWS(Model(bad, 1));
    bad = c;
    bad.word_dim = 11;
    CHECK(config_error(bad).find("embedding width") != std::string::npos);
    bad = c;
    bad.supervision = {{SupervisionKind::coref_all, EncoderLocation::late, 0, 0}};
    CHECK_FALSE(config_error(bad).empty());
    bad = c;
    bad.supervision = {{SupervisionKind::coref_all, EncoderLocation::early, 4, 0}};
    CHECK_FALSE(config_error(bad).empty());
    bad = c;
    bad.supervision = {{SupervisionKind::coref_all, EncoderLocation::early, 0, 1},
                       {SupervisionKind::dep_parse, EncoderLocation::early, 0, 1}};
    CHECK(config_error(bad).find("more than one") != std::string::npos);
    bad = c;
    bad.word_vocab = 0;
    CHECK_FALSE(config_error(bad).empty());
}

TEST_CASE("default supervision placement") {
    auto early = small(Variant::early);
    auto a = default_assignment(early, SupervisionKind::coref_all);
    CHECK(a.location == EncoderLocation::early);
    CHECK(a.layer == 2);
    CHECK(a.head == 0);
    early.early_layers = 2;
    CHECK(default_assignment(early, SupervisionKind::coref_all).layer == 1);
    auto late = default_assignment(small(Variant::late), SupervisionKind::dep_parse);
    CHECK(late.location == EncoderLocation::late);
    CHECK(late.layer == 0);
}

TEST_CASE("variant names") {
    for (auto v : {Variant::base, Variant::early, Variant::late, Variant::both}) CHECK(parse_variant(to_string(v)) == v);
    CHECK(parse_variant("Early") == Variant::early);
    CHECK_FALSE(parse_variant("middle").has_value());
    CHECK(parse_location("late") == EncoderLocation::late);
}

TEST_CASE("parameter count matches the per-layer formula") {
    ModelConfig base;  // default dims
    base.word_vocab = 20000;
    base.char_vocab = 80;
    Model m(base, 1);
    CHECK(m.parameter_count() == expected_params(base));
    CHECK(m.parameter_count() == 100 * 20000 + 16 * 80 + 915100);
    CHECK(m.parameter_count() > 1000000);
    CHECK(m.parameter_count() < 5000000);

    for (auto v : {Variant::early, Variant::late, Variant::both}) {
        auto c = base;
        c.variant = v;
        CHECK(Model(c, 1).parameter_count() == expected_params(c));
    }
}

TEST_CASE("same seed gives identical parameters") {
    auto c = small(Variant::both);
    c.word_vocab = 30;
    c.char_vocab = 10;
    CHECK(Model(c, 4).parameters().snapshot() == Model(c, 4).parameters().snapshot());
    CHECK(Model(c, 4).parameters().snapshot() != Model(c, 5).parameters().snapshot());
}

TEST_CASE("early replaces the contextual GRU with encoder layers") {
    auto base = small(Variant::base);
    base.word_vocab = 30;
    base.char_vocab = 10;
    auto early = base;
    early.variant = Variant::early;
    Model b(base, 1), e(early, 1);
    auto has_prefix = [](const ParameterStore& s, const std::string& p) {
        for (const auto& path : s.paths())
            if (path.rfind(p, 0) == 0) return true;
        return false;
    };
    CHECK(has_prefix(b.parameters(), "contextual.gru"));
    CHECK_FALSE(has_prefix(e.parameters(), "contextual.gru"));
    CHECK_FALSE(has_prefix(b.parameters(), "early."));
    for (int l = 0; l < 4; ++l) CHECK(has_prefix(e.parameters(), "early.layer" + std::to_string(l) + "."));
    CHECK_FALSE(has_prefix(e.parameters(), "early.layer4."));
}

TEST_CASE("forward contract") {
    auto data = two_instances();
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::base);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    Model model(c, 2);
    auto batch = make_batch(data, vocab, {});
    auto out = model.forward(batch, Mode::eval);
    REQUIRE(out.instances.size() == 2);
    auto padded = out.padded_probs(batch.context_length);
    CHECK(padded.size() == 2);
    CHECK(padded[0].size() == 10);
    for (std::size_t b = 0; b < 2; ++b) {
        double total = 0.0;
        for (double p : padded[b]) total += p;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (std::size_t j = 7; j < 10; ++j) CHECK(padded[1][j] == 0.0);

    auto again = model.forward(batch, Mode::eval);
    for (std::size_t b = 0; b < 2; ++b) {
        auto x = out.instances[b].answer_probs.data();
        auto y = again.instances[b].answer_probs.data();
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
    CHECK_THROWS(model.forward(batch, Mode::train));
}

TEST_CASE("padding does not change an instance's output") {
    auto data = two_instances();
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::both);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    Model model(c, 3);
    auto together = model.forward(make_batch(data, vocab, {}), Mode::eval);
    auto alone = model.forward(make_batch(std::vector<Instance>{data[1]}, vocab, {}), Mode::eval);
    auto x = together.instances[1].answer_probs.data();
    auto y = alone.instances[0].answer_probs.data();
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("attention capture") {
    auto data = two_instances();
    data[1].context.resize(10);
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::early);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    Model model(c, 1);
    auto out = model.forward(make_batch(data, vocab, {}), Mode::eval);
    for (const auto& inst : out.instances) {
        CHECK(inst.attention.size() == 16);
        for (const auto& a : inst.attention) CHECK(a.weights.shape() == Shape{10, 10});
    }
    CHECK_NOTHROW(out.instances[0].attention_at(EncoderLocation::early, 3, 3));
    CHECK_THROWS_AS(out.instances[0].attention_at(EncoderLocation::late, 0, 0), std::out_of_range);

    auto both = c;
    both.variant = Variant::both;
    Model mb(both, 1);
    auto ob = mb.forward(make_batch(data, vocab, {}), Mode::eval);
    CHECK(ob.instances[0].attention.size() == 20);
    CHECK_NOTHROW(ob.instances[0].attention_at(EncoderLocation::late, 0, 2));
}

TEST_CASE("syntax-supervised heads only see their sentence") {
    auto data = synth_generate(2, 8);
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::early);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    c.supervision = {{SupervisionKind::dep_parse, EncoderLocation::early, 1, 2}};
    Model model(c, 1);
    auto batch = make_batch(data, vocab, batch_options_for(c, true));
    auto out = model.forward(batch, Mode::eval);
    for (std::size_t b = 0; b < 2; ++b) {
        const auto& ann = *data[b].annotation;
        const auto& a = out.instances[b].attention_at(EncoderLocation::early, 1, 2);
        const auto& open = out.instances[b].attention_at(EncoderLocation::early, 1, 1);
        bool crosses = false;
        for (std::size_t i = 0; i < data[b].context.size(); ++i)
            for (std::size_t j = 0; j < data[b].context.size(); ++j) {
                if (sentence_of(ann, i) != sentence_of(ann, j)) {
                    CHECK(a.at(i, j) == 0.0);
                    crosses = crosses || open.at(i, j) > 0.0;
                }
            }
        CHECK(crosses);
    }
}

TEST_CASE("instance loss combines answer and supervision") {
    auto data = synth_generate(1, 2);
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::early);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    c.supervision = {default_assignment(c, SupervisionKind::coref_all)};
    c.lambda = 0.3;
    Model model(c, 1);
    auto batch = make_batch(data, vocab, batch_options_for(c, true));
    auto out = model.forward(batch, Mode::eval);
    auto loss = model.instance_loss(batch, 0, out.instances[0]);
    const auto& targets = batch.supervision.at(SupervisionKind::coref_all)[0];
    const double sup = supervision_loss(out.instances[0].attention_at(EncoderLocation::early, 2, 0), targets).item();
    const double ans = answer_loss(out.instances[0].answer_probs, batch.answer_positions[0]).item();
    CHECK(loss.breakdown.supervision_losses.at("CorefAll") == doctest::Approx(sup).epsilon(1e-12));
    CHECK(loss.breakdown.total == doctest::Approx(ans + 0.3 * sup).epsilon(1e-12));
    CHECK(loss.total.item() == doctest::Approx(ans + 0.3 * sup).epsilon(1e-12));
    Tape::current().clear();
}

TEST_CASE("contextual override is wired between embedding and flow") {
    auto data = two_instances();
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::base);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    Model model(c, 1);
    std::vector<Shape> seen;
    model.set_contextual_override([&](const Tensor& x) {
        seen.push_back(x.shape());
        return Tensor::full({x.dim(0), 2 * c.hidden}, 0.5);
    });
    auto out = model.forward(make_batch(data, vocab, {}), Mode::eval);
    REQUIRE(seen.size() == 4);  // context and query of two instances
    CHECK(seen[0] == Shape{10, c.embedding_dim()});
    CHECK(seen[1] == Shape{4, c.embedding_dim()});
    // Identical contextual vectors everywhere: every position looks the same
    // until the modeling GRU, which sees only position order.
    auto alone = model.forward(make_batch(std::vector<Instance>{data[1]}, vocab, {}), Mode::eval);
    auto x = out.instances[1].answer_probs.data();
    auto y = alone.instances[0].answer_probs.data();
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(y[i]));
}

TEST_CASE("attention flow") {
    auto c = small(Variant::base);
    c.word_vocab = 20;
    c.char_vocab = 10;
    Model model(c, 5);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> dist;
    auto rnd = [&](Shape s) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = dist(rng);
        return Tensor::from(s, v);
    };
    const std::size_t d = 2 * c.hidden;
    auto h = rnd({5, d}), u = rnd({3, d});
    CHECK(model.attention_flow(h, u).shape() == Shape{5, 4 * d});

    // One query token: the query-weight term is a constant that every
    // softmax in the flow cancels.
    auto u1 = rnd({1, d});
    auto before = model.attention_flow(h, u1);
    Tensor wq = model.parameters().get("flow.w_query");
    for (auto& v : wq.mutable_data()) v += 3.0;
    auto after = model.attention_flow(h, u1);
    for (std::size_t i = 0; i < before.numel(); ++i) CHECK(before[i] == doctest::Approx(after[i]).epsilon(1e-9));

    auto hc = h.clone(true), uc = u.clone(true);
    auto probe = rnd({5, 4 * d});
    std::vector<Tensor> leaves{hc, uc};
    for (const auto& p : model.parameters().paths())
        if (p.rfind("flow.", 0) == 0) leaves.push_back(model.parameters().get(p));
    auto f = [&] { return sum_all(mul(model.attention_flow(hc, uc), probe)); };
    CHECK(gradient_check(f, leaves).max_relative_error < 1e-4);
}

TEST_CASE("contextual hook replaces the embedding layer") {
    auto data = two_instances();
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::early);
    c.contextual_hook = ContextualHookConfig{"hash", 12, 0.2};
    Model model(c, 1);
    for (const auto& p : model.parameters().paths()) CHECK(p.rfind("embed.words", 0) != 0);
    CHECK(model.parameters().contains("embed.hook_projection.weight"));
    auto out = model.forward(make_batch(data, vocab, {}), Mode::eval);
    CHECK(out.instances[0].answer_probs.numel() == 10);

    HashContextualSource src(6);
    auto a = src.embed({"x", "y", "z"});
    auto b = src.embed({"x", "y", "w"});
    CHECK(a.shape() == Shape{3, 6});
    for (std::size_t j = 0; j < 6; ++j) CHECK(a.at(0, j) == b.at(0, j));
    bool differs = false;
    for (std::size_t j = 0; j < 6; ++j) differs = differs || a.at(1, j) != b.at(1, j);
    CHECK(differs);

    c.contextual_hook->source = "elmo";
    CHECK_FALSE(config_error(c).empty());
}

TEST_CASE("dropout is active only in train mode") {
    auto data = two_instances();
    auto vocab = Vocabulary::build(data, 1);
    auto c = small(Variant::base);
    c.word_vocab = vocab.word_count();
    c.char_vocab = vocab.char_count();
    c.dropout = 0.3;
    Model model(c, 1);
    auto batch = make_batch(data, vocab, {});
    std::mt19937_64 r1(1), r2(2);
    auto a = model.forward(batch, Mode::train, &r1);
    auto b = model.forward(batch, Mode::train, &r2);
    Tape::current().clear();
    bool differs = false;
    for (std::size_t i = 0; i < 10; ++i) differs = differs || a.instances[0].answer_probs[i] != b.instances[0].answer_probs[i];
    CHECK(differs);
}
