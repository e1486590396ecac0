#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "supattn/data.hpp"
#include "supattn/layers.hpp"
#include "supattn/objective.hpp"
#include "supattn/supervision.hpp"

namespace supattn {

enum class Variant { base, early, late, both };
enum class EncoderLocation { early, late };

std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view name);
std::string_view to_string(EncoderLocation loc);
std::optional<EncoderLocation> parse_location(std::string_view name);

struct SupervisionAssignment {
    SupervisionKind kind = SupervisionKind::coref_all;
    EncoderLocation location = EncoderLocation::early;
    std::size_t layer = 0;  // 0-based within the encoder at `location`
    std::size_t head = 0;

    bool operator==(const SupervisionAssignment&) const = default;
};

// External contextual vectors that replace the word/char embedding layer
// after a projection to the embedding width.
struct ContextualHookConfig {
    std::string source = "hash";  // only the built-in hash source ships
    std::size_t dim = 64;
    double dropout = 0.2;

    bool operator==(const ContextualHookConfig&) const = default;
};

struct ModelConfig {
    Variant variant = Variant::base;
    std::size_t word_dim = 100;
    std::size_t char_dim = 16;
    std::size_t char_filters = 100;
    std::size_t char_width = 5;
    std::size_t hidden = 100;          // GRU hidden size per direction
    std::size_t modeling_layers = 2;
    std::size_t early_layers = 4;
    std::size_t late_layers = 1;
    std::size_t heads = 4;
    std::size_t d_model = 200;         // self-attention width and projected key/query/value total
    double dropout = 0.1;
    bool position_signal = true;       // sinusoidal positions before the early encoder
    std::vector<SupervisionAssignment> supervision;
    double lambda = 0.3;
    bool weight_by_targets = true;
    std::optional<ContextualHookConfig> contextual_hook;
    // Sizes of the vocabularies the embedding tables are built for.
    std::size_t word_vocab = 0;
    std::size_t char_vocab = 0;

    bool operator==(const ModelConfig&) const = default;

    std::size_t embedding_dim() const { return word_dim + char_filters; }
    bool has_early() const { return variant == Variant::early || variant == Variant::both; }
    bool has_late() const { return variant == Variant::late || variant == Variant::both; }
    // Width of the contextual layer output, per token.
    std::size_t contextual_dim() const { return has_early() ? d_model : 2 * hidden; }
};

// Empty string when valid, otherwise the first problem found.
std::string config_error(const ModelConfig& config);

// Batch contents the model needs: the supervision kinds it is assigned and
// sentence windows when any head is syntax-supervised.
BatchOptions batch_options_for(const ModelConfig& config, bool training);

// The default placement: third of four early layers (or the last one when
// fewer), else the first late layer; head 0.
SupervisionAssignment default_assignment(const ModelConfig& config, SupervisionKind kind);

class ContextualSource {
public:
    virtual ~ContextualSource() = default;
    virtual std::size_t dim() const = 0;
    // (tokens.size(), dim())
    virtual Tensor embed(const std::vector<std::string>& tokens) const = 0;
};

// Deterministic stand-in for a pretrained contextual encoder: each token maps
// to a fixed pseudo-random vector derived from its string, mixed with its
// neighbours so the vectors depend on context.
class HashContextualSource final : public ContextualSource {
public:
    explicit HashContextualSource(std::size_t dim) : dim_(dim) {}
    std::size_t dim() const override { return dim_; }
    Tensor embed(const std::vector<std::string>& tokens) const override;

private:
    std::size_t dim_;
};

enum class Mode { train, eval };

struct AttentionCapture {
    EncoderLocation location = EncoderLocation::early;
    std::size_t layer = 0;
    std::size_t head = 0;
    Tensor weights;  // (n, n) over the real context positions
};

struct InstanceOutput {
    Tensor answer_logits;  // (n)
    Tensor answer_probs;   // (n), masked softmax over context positions
    std::vector<AttentionCapture> attention;

    const Tensor& attention_at(EncoderLocation loc, std::size_t layer, std::size_t head) const;
};

struct ForwardOutput {
    std::vector<InstanceOutput> instances;
    // (batch, padded context) with zeros at pad positions.
    std::vector<std::vector<double>> padded_probs(std::size_t padded_length) const;
};

class Model {
public:
    // Creates and initializes every parameter from `seed`.
    Model(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.parameter_count(); }

    ForwardOutput forward(const Batch& batch, Mode mode, std::mt19937_64* rng = nullptr) const;
    InstanceOutput forward_instance(const Batch& batch, std::size_t b, const ForwardContext& ctx) const;

    // Bidirectional attention flow: (n, d) x (m, d) -> layer-normalized (n, 4d).
    Tensor attention_flow(const Tensor& context, const Tensor& query) const;

    // Answer loss plus lambda-weighted supervision losses of the configured
    // assignments for row b of the batch.
    CombinedLoss instance_loss(const Batch& batch, std::size_t b, const InstanceOutput& out) const;

    // Test seam: replaces the contextual stage (GRU or early encoder).
    void set_contextual_override(std::function<Tensor(const Tensor&)> fn) { contextual_override_ = std::move(fn); }

private:
    Tensor embed(const std::vector<std::size_t>& ids, const std::vector<std::vector<std::size_t>>& chars,
                 const std::vector<std::string>& tokens, std::size_t length, const ForwardContext& ctx) const;
    std::vector<Tensor> head_masks(EncoderLocation loc, std::size_t layer, std::size_t n, const Batch& batch,
                                   std::size_t b, bool context_side) const;

    ModelConfig config_;
    ParameterStore params_;
    Embedding words_;
    CharCnn chars_;
    Linear hook_projection_;
    std::unique_ptr<ContextualSource> hook_source_;
    BiGru contextual_;
    std::vector<SelfAttentionLayer> early_;
    Tensor flow_weight_context_, flow_weight_query_, flow_weight_product_;
    LayerNorm flow_norm_;
    std::vector<SelfAttentionLayer> late_;
    BiGru modeling_;
    LayerNorm modeling_norm_;
    Linear output_;
    std::function<Tensor(const Tensor&)> contextual_override_;
};

}  // namespace supattn
