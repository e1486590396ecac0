#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "supattn/tensor.hpp"

namespace supattn {

enum class Init {
    zeros,
    ones,
    xavier_uniform,      // linear maps
    embedding_uniform,   // uniform(-0.05, 0.05)
    recurrent_uniform,   // uniform(-1/sqrt(fan_out/3), +) for GRU gate blocks
};

// Named, ordered collection of trainable tensors. Paths are unique and every
// stored tensor requires grad. Initialization draws from one seeded stream in
// creation order, so a config and a seed fully determine the values.
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Tensor create(const std::string& path, Shape shape, Init init);
    const Tensor& get(const std::string& path) const;
    bool contains(const std::string& path) const { return index_.count(path) != 0; }

    const std::vector<std::string>& paths() const { return order_; }
    std::size_t size() const { return order_.size(); }
    std::size_t parameter_count() const;

    void zero_grad();

    using Snapshot = std::map<std::string, std::vector<double>>;
    Snapshot snapshot() const;
    // Overwrites values in place; paths and sizes must match exactly.
    void restore(const Snapshot& values);

private:
    std::mt19937_64 rng_;
    std::vector<std::string> order_;
    std::map<std::string, Tensor> index_;
};

// Text checkpoint, one header line, then per parameter a descriptor line and
// a line of %.17g values (exact round trip):
//   supattn-checkpoint 1
//   params <count>
//   <path> <rank> <extent>...
//   <values>
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& file);
// Every path in the file must exist in the store with the same shape, and
// vice versa; otherwise throws naming the offending path.
void load_checkpoint(ParameterStore& store, const std::filesystem::path& file);

struct ForwardContext {
    bool train = false;
    std::mt19937_64* rng = nullptr;
};

// Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is a no-op.
Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx);

class Linear {
public:
    Linear() = default;
    Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, bool bias = true);
    Tensor operator()(const Tensor& x) const;
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

private:
    Tensor weight_, bias_;
    std::size_t in_ = 0, out_ = 0;
};

class Embedding {
public:
    Embedding() = default;
    // Rows equal to `padding_index` always embed to zero.
    Embedding(ParameterStore& store, const std::string& prefix, std::size_t vocab, std::size_t dim,
              std::optional<std::size_t> padding_index = std::nullopt);
    Tensor operator()(std::span<const std::size_t> ids) const;
    std::size_t dim() const { return dim_; }
    std::size_t vocab() const { return vocab_; }

private:
    Tensor table_;
    std::size_t vocab_ = 0, dim_ = 0;
    std::optional<std::size_t> padding_;
};

// Character CNN: convolution of `width` over character positions followed by
// a max over positions, per filter.
class CharCnn {
public:
    CharCnn() = default;
    CharCnn(ParameterStore& store, const std::string& prefix, std::size_t char_vocab, std::size_t char_dim,
            std::size_t filters, std::size_t width, std::size_t pad_id);

    // chars[i] are the character ids of token i; short tokens are padded with
    // the pad id up to max(width, longest token).
    Tensor operator()(const std::vector<std::vector<std::size_t>>& chars) const;
    // (n, c_max, char_dim) -> (n, filters)
    Tensor encode(const Tensor& char_embeddings) const;

    std::size_t filters() const { return filters_; }
    std::size_t width() const { return width_; }

private:
    Embedding chars_;
    Tensor weight_, bias_;
    std::size_t filters_ = 0, width_ = 0, char_dim_ = 0, pad_ = 0;
};

class BiGru {
public:
    BiGru() = default;
    BiGru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t layers);
    // (n, in) -> (n, 2*hidden); dropout is applied to each layer's input.
    Tensor operator()(const Tensor& x, double dropout_p, const ForwardContext& ctx) const;

    std::size_t hidden() const { return hidden_; }

private:
    struct Direction {
        Tensor w_input, w_hidden, b_input, b_hidden;
    };
    std::vector<Direction> forward_, backward_;
    std::size_t hidden_ = 0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    // Without a bias the shift is a fixed zero, for outputs where a learned
    // shift cannot matter.
    LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim, bool bias = true);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

private:
    Tensor gain_, bias_;
};

class FeedForward {
public:
    FeedForward() = default;
    FeedForward(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t inner);
    Tensor operator()(const Tensor& x, double dropout_p, const ForwardContext& ctx) const;

private:
    Linear inner_, outer_;
};

struct AttentionOutput {
    Tensor output;
    // One (n, n) row-stochastic matrix per head, before attention dropout.
    std::vector<Tensor> attention;
};

// Post-norm Transformer encoder layer: multi-head scaled dot-product
// self-attention and a position-wise feed-forward block, each wrapped in a
// residual connection and layer normalization. Queries, keys and values are
// projected to `attn_dim` in total and split evenly across heads.
class SelfAttentionLayer {
public:
    SelfAttentionLayer() = default;
    SelfAttentionLayer(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t attn_dim,
                       std::size_t heads, std::size_t ff_inner);

    // head_masks: one (n, n) binary mask per head.
    AttentionOutput operator()(const Tensor& x, const std::vector<Tensor>& head_masks, double dropout_p,
                               const ForwardContext& ctx) const;

    std::size_t heads() const { return heads_; }
    std::size_t dim() const { return dim_; }

private:
    Linear query_, key_, value_, output_;
    LayerNorm attn_norm_, ff_norm_;
    FeedForward ff_;
    std::size_t dim_ = 0, attn_dim_ = 0, heads_ = 0;
};

// Sinusoidal position signal of shape (n, dim).
Tensor sinusoidal_positions(std::size_t n, std::size_t dim);

}  // namespace supattn
