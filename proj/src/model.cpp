#include "supattn/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>

namespace supattn {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

Tensor ones(std::size_t rows, std::size_t cols) { return Tensor::full({rows, cols}, 1.0); }

}  // namespace

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::base: return "base";
        case Variant::early: return "early";
        case Variant::late: return "late";
        case Variant::both: return "both";
    }
    return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
    for (auto v : {Variant::base, Variant::early, Variant::late, Variant::both})
        if (lower(name) == to_string(v)) return v;
    return std::nullopt;
}

std::string_view to_string(EncoderLocation loc) { return loc == EncoderLocation::early ? "early" : "late"; }

std::optional<EncoderLocation> parse_location(std::string_view name) {
    if (lower(name) == "early") return EncoderLocation::early;
    if (lower(name) == "late") return EncoderLocation::late;
    return std::nullopt;
}

std::string config_error(const ModelConfig& c) {
    if (c.heads == 0) return "heads must be positive";
    if (c.d_model == 0 || c.d_model % c.heads != 0) {
        return "d_model " + std::to_string(c.d_model) + " is not divisible by " + std::to_string(c.heads) + " heads";
    }
    if (c.hidden == 0 || c.modeling_layers == 0) return "hidden size and modeling layers must be positive";
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) return "dropout must lie in [0, 1)";
    if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) return "lambda must be a finite non-negative number";
    if (c.contextual_hook) {
        if (c.contextual_hook->source != "hash") return "unknown contextual embedding source '" + c.contextual_hook->source + "'";
        if (c.contextual_hook->dim == 0) return "contextual embedding dimension must be positive";
    } else {
        if (c.word_vocab < 2 || c.char_vocab < 2) return "vocabulary sizes are not set";
        if (c.word_dim == 0 || c.char_filters == 0 || c.char_dim == 0 || c.char_width == 0) {
            return "embedding dimensions must be positive";
        }
    }
    if (c.has_early()) {
        if (c.early_layers == 0) return "early encoder needs at least one layer";
        if (c.embedding_dim() != c.d_model) {
            return "early encoder needs embedding width (" + std::to_string(c.embedding_dim()) + ") equal to d_model (" +
                   std::to_string(c.d_model) + ")";
        }
    }
    if (c.has_late() && c.late_layers == 0) return "late encoder needs at least one layer";
    std::set<std::tuple<int, std::size_t, std::size_t>> used;
    for (const auto& a : c.supervision) {
        const bool early = a.location == EncoderLocation::early;
        if (early && !c.has_early()) return "supervision targets the early encoder, which this variant lacks";
        if (!early && !c.has_late()) return "supervision targets the late encoder, which this variant lacks";
        const std::size_t layers = early ? c.early_layers : c.late_layers;
        if (a.layer >= layers) return "supervision layer " + std::to_string(a.layer) + " does not exist";
        if (a.head >= c.heads) return "supervision head " + std::to_string(a.head) + " does not exist";
        if (!used.insert({early ? 0 : 1, a.layer, a.head}).second) {
            return "more than one supervision assigned to " + std::string(to_string(a.location)) + " layer " +
                   std::to_string(a.layer) + " head " + std::to_string(a.head);
        }
    }
    return {};
}

BatchOptions batch_options_for(const ModelConfig& config, bool training) {
    BatchOptions options;
    options.require_answer = training;
    for (const auto& a : config.supervision) {
        options.supervision.insert(a.kind);
        if (a.kind == SupervisionKind::dep_parse) options.sentence_windows = true;
    }
    return options;
}

SupervisionAssignment default_assignment(const ModelConfig& config, SupervisionKind kind) {
    SupervisionAssignment a;
    a.kind = kind;
    if (config.has_early()) {
        a.location = EncoderLocation::early;
        a.layer = config.early_layers >= 3 ? 2 : config.early_layers - 1;
    } else {
        a.location = EncoderLocation::late;
        a.layer = 0;
    }
    a.head = 0;
    return a;
}

Tensor HashContextualSource::embed(const std::vector<std::string>& tokens) const {
    const std::size_t n = tokens.size();
    std::vector<double> base(n * dim_);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (unsigned char c : tokens[i]) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        std::mt19937_64 gen(h);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (std::size_t j = 0; j < dim_; ++j) base[i * dim_ + j] = dist(gen);
    }
    std::vector<double> out(base);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim_; ++j) {
            if (i > 0) out[i * dim_ + j] += 0.5 * base[(i - 1) * dim_ + j];
            if (i + 1 < n) out[i * dim_ + j] += 0.5 * base[(i + 1) * dim_ + j];
        }
    return Tensor::from({n, dim_}, std::move(out));
}

const Tensor& InstanceOutput::attention_at(EncoderLocation loc, std::size_t layer, std::size_t head) const {
    for (const auto& c : attention)
        if (c.location == loc && c.layer == layer && c.head == head) return c.weights;
    throw std::out_of_range("no attention captured at " + std::string(to_string(loc)) + " layer " +
                            std::to_string(layer) + " head " + std::to_string(head));
}

std::vector<std::vector<double>> ForwardOutput::padded_probs(std::size_t padded_length) const {
    std::vector<std::vector<double>> out;
    for (const auto& inst : instances) {
        std::vector<double> row(padded_length, 0.0);
        auto p = inst.answer_probs.data();
        std::copy(p.begin(), p.end(), row.begin());
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), params_(seed) {
    if (auto err = config_error(config_); !err.empty()) throw std::invalid_argument("invalid model config: " + err);
    const auto& c = config_;
    if (c.contextual_hook) {
        hook_source_ = std::make_unique<HashContextualSource>(c.contextual_hook->dim);
        hook_projection_ = Linear(params_, "embed.hook_projection", c.contextual_hook->dim, c.embedding_dim());
    } else {
        words_ = Embedding(params_, "embed.words", c.word_vocab, c.word_dim, Vocabulary::kPad);
        chars_ = CharCnn(params_, "embed.chars", c.char_vocab, c.char_dim, c.char_filters, c.char_width,
                         Vocabulary::kPad);
    }
    if (c.has_early()) {
        for (std::size_t l = 0; l < c.early_layers; ++l) {
            early_.emplace_back(params_, "early.layer" + std::to_string(l), c.d_model, c.d_model, c.heads,
                                4 * c.d_model);
        }
    } else {
        contextual_ = BiGru(params_, "contextual.gru", c.embedding_dim(), c.hidden, 1);
    }
    const std::size_t d = c.contextual_dim();
    flow_weight_context_ = params_.create("flow.w_context", {d, 1}, Init::xavier_uniform);
    flow_weight_query_ = params_.create("flow.w_query", {d, 1}, Init::xavier_uniform);
    flow_weight_product_ = params_.create("flow.w_product", {d}, Init::embedding_uniform);
    flow_norm_ = LayerNorm(params_, "flow.norm", 4 * d);
    if (c.has_late()) {
        for (std::size_t l = 0; l < c.late_layers; ++l) {
            late_.emplace_back(params_, "late.layer" + std::to_string(l), 4 * d, c.d_model, c.heads, 4 * c.d_model);
        }
    }
    modeling_ = BiGru(params_, "modeling.gru", 4 * d, c.hidden, c.modeling_layers);
    // The modeling output reaches the logits only through the output layer,
    // where a per-feature shift becomes a shift shared by every position.
    modeling_norm_ = LayerNorm(params_, "modeling.norm", 2 * c.hidden, false);
    // No bias: a shift shared by every position cancels in the softmax.
    output_ = Linear(params_, "output", 4 * d + 2 * c.hidden, 1, false);
}

Tensor Model::embed(const std::vector<std::size_t>& ids, const std::vector<std::vector<std::size_t>>& chars,
                    const std::vector<std::string>& tokens, std::size_t length, const ForwardContext& ctx) const {
    if (hook_source_) {
        Tensor external = hook_source_->embed(std::vector<std::string>(tokens.begin(), tokens.begin() + length));
        return dropout(hook_projection_(external), config_.contextual_hook->dropout, ctx);
    }
    std::vector<std::size_t> word_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(length));
    std::vector<std::vector<std::size_t>> char_ids(chars.begin(), chars.begin() + static_cast<std::ptrdiff_t>(length));
    Tensor w = words_(word_ids);
    Tensor ch = dropout(chars_(char_ids), config_.dropout, ctx);
    return concat({w, ch}, 1);
}

std::vector<Tensor> Model::head_masks(EncoderLocation loc, std::size_t layer, std::size_t n, const Batch& batch,
                                      std::size_t b, bool context_side) const {
    std::vector<Tensor> masks(config_.heads);
    Tensor all = ones(n, n);
    for (std::size_t h = 0; h < config_.heads; ++h) {
        masks[h] = all;
        if (!context_side) continue;
        for (const auto& a : config_.supervision) {
            if (a.location != loc || a.layer != layer || a.head != h || a.kind != SupervisionKind::dep_parse) continue;
            if (batch.window_masks.size() <= b) {
                throw std::invalid_argument("batch lacks the sentence windows required by a DepParse head");
            }
            const Tensor& padded = batch.window_masks[b];
            const std::size_t N = padded.dim(0);
            std::vector<double> window(n * n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) window[i * n + j] = padded[i * N + j];
            masks[h] = Tensor::from({n, n}, std::move(window));
        }
    }
    return masks;
}

Tensor Model::attention_flow(const Tensor& context, const Tensor& query) const {
    const std::size_t n = context.dim(0), m = query.dim(0), d = context.dim(1);
    if (query.dim(1) != d) {
        throw ShapeError("attention_flow: context " + shape_str(context.shape()) + " vs query " + shape_str(query.shape()));
    }
    // Trilinear similarity w . [h; u; h*u]
    Tensor from_context = broadcast(matmul(context, flow_weight_context_), {n, m});
    Tensor from_query = broadcast(transpose(matmul(query, flow_weight_query_)), {n, m});
    Tensor product = matmul(mul(context, broadcast(flow_weight_product_, {n, d})), transpose(query));
    Tensor similarity = add(add(from_context, from_query), product);

    Tensor c2q = masked_softmax(similarity, ones(n, m));
    Tensor attended_query = matmul(c2q, query);  // (n, d)

    Tensor strongest = reshape(max(similarity, 1), {1, n});
    Tensor q2c = masked_softmax(strongest, ones(1, n));
    Tensor attended_context = broadcast(matmul(q2c, context), {n, d});

    Tensor merged = concat({context, attended_query, mul(context, attended_query), mul(context, attended_context)}, 1);
    return flow_norm_(merged);
}

InstanceOutput Model::forward_instance(const Batch& batch, std::size_t b, const ForwardContext& ctx) const {
    const std::size_t n = batch.context_size(b);
    std::size_t m = batch.query_size(b);
    InstanceOutput out;

    Tensor context = embed(batch.context_ids[b], batch.context_chars[b], batch.context_tokens[b], n, ctx);
    Tensor query;
    if (m == 0) {
        m = 1;
        query = embed({Vocabulary::kPad}, {{}}, {"<pad>"}, 1, ctx);
    } else {
        query = embed(batch.query_ids[b], batch.query_chars[b], batch.query_tokens[b], m, ctx);
    }

    if (contextual_override_) {
        context = contextual_override_(context);
        query = contextual_override_(query);
    } else if (config_.has_early()) {
        if (config_.position_signal) {
            context = add(context, sinusoidal_positions(n, config_.d_model));
            query = add(query, sinusoidal_positions(m, config_.d_model));
        }
        for (std::size_t l = 0; l < early_.size(); ++l) {
            auto enc = early_[l](context, head_masks(EncoderLocation::early, l, n, batch, b, true), config_.dropout, ctx);
            for (std::size_t h = 0; h < enc.attention.size(); ++h) {
                out.attention.push_back({EncoderLocation::early, l, h, enc.attention[h]});
            }
            context = enc.output;
            query = early_[l](query, head_masks(EncoderLocation::early, l, m, batch, b, false), config_.dropout, ctx)
                        .output;
        }
    } else {
        context = contextual_(context, config_.dropout, ctx);
        query = contextual_(query, config_.dropout, ctx);
    }

    Tensor flow = attention_flow(context, query);
    for (std::size_t l = 0; l < late_.size(); ++l) {
        auto enc = late_[l](flow, head_masks(EncoderLocation::late, l, n, batch, b, true), config_.dropout, ctx);
        for (std::size_t h = 0; h < enc.attention.size(); ++h) {
            out.attention.push_back({EncoderLocation::late, l, h, enc.attention[h]});
        }
        flow = enc.output;
    }
    Tensor modeled = modeling_norm_(modeling_(flow, config_.dropout, ctx));
    Tensor features = dropout(concat({flow, modeled}, 1), config_.dropout, ctx);
    Tensor logits = reshape(output_(features), {1, n});
    out.answer_logits = reshape(logits, {n});
    out.answer_probs = reshape(masked_softmax(logits, Tensor::full({1, n}, 1.0)), {n});
    return out;
}

ForwardOutput Model::forward(const Batch& batch, Mode mode, std::mt19937_64* rng) const {
    ForwardContext ctx;
    ctx.train = mode == Mode::train;
    ctx.rng = rng;
    if (ctx.train && !rng && config_.dropout > 0.0) throw std::invalid_argument("train mode needs a random stream");
    ForwardOutput out;
    for (std::size_t b = 0; b < batch.size(); ++b) out.instances.push_back(forward_instance(batch, b, ctx));
    return out;
}

CombinedLoss Model::instance_loss(const Batch& batch, std::size_t b, const InstanceOutput& out) const {
    const std::size_t n = out.answer_probs.numel();
    Tensor answer = answer_loss(out.answer_probs, batch.answer_positions.at(b));
    std::vector<std::pair<std::string, Tensor>> aux;
    for (const auto& a : config_.supervision) {
        auto it = batch.supervision.find(a.kind);
        if (it == batch.supervision.end() || it->second.size() <= b) {
            throw std::invalid_argument("batch lacks " + std::string(to_string(a.kind)) + " supervision");
        }
        SupervisionMatrix targets = it->second[b];
        targets.rows.resize(n);
        aux.emplace_back(std::string(to_string(a.kind)),
                         supervision_loss(out.attention_at(a.location, a.layer, a.head), targets, config_.weight_by_targets));
    }
    return combine_losses(answer, aux, config_.lambda);
}

}  // namespace supattn
