#include "supattn/layers.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace supattn {

Tensor ParameterStore::create(const std::string& path, Shape shape, Init init) {
    if (index_.count(path)) throw std::invalid_argument("duplicate parameter path: " + path);
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    auto fill_uniform = [&](double bound) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : values) v = dist(rng_);
    };
    switch (init) {
        case Init::zeros: break;
        case Init::ones: std::fill(values.begin(), values.end(), 1.0); break;
        case Init::xavier_uniform: {
            const double fan_in = static_cast<double>(shape.front());
            const double fan_out = static_cast<double>(shape.back());
            fill_uniform(std::sqrt(6.0 / (fan_in + fan_out)));
            break;
        }
        case Init::embedding_uniform: fill_uniform(0.05); break;
        case Init::recurrent_uniform: fill_uniform(1.0 / std::sqrt(static_cast<double>(shape.back()) / 3.0)); break;
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    order_.push_back(path);
    index_.emplace(path, t);
    return t;
}

const Tensor& ParameterStore::get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::out_of_range("unknown parameter path: " + path);
    return it->second;
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [path, t] : index_) total += t.numel();
    return total;
}

void ParameterStore::zero_grad() {
    for (auto& [path, t] : index_) {
        Tensor handle = t;
        handle.zero_grad();
    }
}

ParameterStore::Snapshot ParameterStore::snapshot() const {
    Snapshot out;
    for (const auto& [path, t] : index_) out.emplace(path, std::vector<double>(t.data().begin(), t.data().end()));
    return out;
}

void ParameterStore::restore(const Snapshot& values) {
    if (values.size() != index_.size()) {
        throw std::invalid_argument("restore: snapshot holds " + std::to_string(values.size()) + " parameters, store has " +
                                    std::to_string(index_.size()));
    }
    for (auto& [path, t] : index_) {
        auto it = values.find(path);
        if (it == values.end()) throw std::invalid_argument("restore: snapshot lacks " + path);
        if (it->second.size() != t.numel()) throw std::invalid_argument("restore: size mismatch for " + path);
        Tensor handle = t;
        std::copy(it->second.begin(), it->second.end(), handle.mutable_data().begin());
    }
}

namespace {
constexpr const char* kCheckpointMagic = "supattn-checkpoint";
constexpr int kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    out << "params " << store.size() << '\n';
    char buf[40];
    for (const auto& path : store.paths()) {
        const Tensor& t = store.get(path);
        out << path << ' ' << t.rank();
        for (auto e : t.shape()) out << ' ' << e;
        out << '\n';
        bool first = true;
        for (double v : t.data()) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            if (!first) out << ' ';
            out << buf;
            first = false;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + file.string());
}

void load_checkpoint(ParameterStore& store, const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != kCheckpointMagic || version != kCheckpointVersion) {
        throw std::runtime_error(file.string() + " is not a version " + std::to_string(kCheckpointVersion) +
                                 " checkpoint");
    }
    std::string tag;
    std::size_t count = 0;
    in >> tag >> count;
    if (tag != "params") throw std::runtime_error("malformed checkpoint header in " + file.string());
    if (count != store.size()) {
        throw std::runtime_error("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                                 std::to_string(store.size()));
    }
    ParameterStore::Snapshot values;
    for (std::size_t k = 0; k < count; ++k) {
        std::string path;
        std::size_t rank = 0;
        in >> path >> rank;
        Shape shape(rank);
        for (auto& e : shape) in >> e;
        if (!in) throw std::runtime_error("truncated checkpoint " + file.string());
        if (!store.contains(path)) throw std::runtime_error("checkpoint parameter not in model: " + path);
        if (store.get(path).shape() != shape) {
            throw std::runtime_error("shape mismatch for " + path + ": checkpoint " + shape_str(shape) + ", model " +
                                     shape_str(store.get(path).shape()));
        }
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) {
            std::string tok;
            in >> tok;
            x = std::strtod(tok.c_str(), nullptr);
        }
        if (!in) throw std::runtime_error("truncated values for " + path);
        values.emplace(path, std::move(v));
    }
    store.restore(values);
}

Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx) {
    if (!ctx.train || p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout probability must be below 1");
    if (!ctx.rng) throw std::invalid_argument("dropout in train mode needs a random stream");
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<double> mask(x.numel());
    const double survivor = 1.0 / (1.0 - p);
    for (auto& m : mask) m = keep(*ctx.rng) ? survivor : 0.0;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------

Linear::Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, bool bias)
    : in_(in), out_(out) {
    weight_ = store.create(prefix + ".weight", {in, out}, Init::xavier_uniform);
    if (bias) bias_ = store.create(prefix + ".bias", {out}, Init::zeros);
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight_);
    if (bias_.defined()) y = add(y, broadcast(bias_, y.shape()));
    return y;
}

Embedding::Embedding(ParameterStore& store, const std::string& prefix, std::size_t vocab, std::size_t dim,
                     std::optional<std::size_t> padding_index)
    : vocab_(vocab), dim_(dim), padding_(padding_index) {
    table_ = store.create(prefix + ".table", {vocab, dim}, Init::embedding_uniform);
}

Tensor Embedding::operator()(std::span<const std::size_t> ids) const {
    for (auto id : ids) {
        if (id >= vocab_) {
            throw std::out_of_range("embedding id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab_));
        }
    }
    Tensor rows = gather_rows(table_, ids);
    if (!padding_) return rows;
    bool any_pad = false;
    std::vector<double> keep(ids.size() * dim_, 1.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == *padding_) {
            any_pad = true;
            std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(i * dim_), dim_, 0.0);
        }
    }
    return any_pad ? mul(rows, Tensor::from(rows.shape(), std::move(keep))) : rows;
}

CharCnn::CharCnn(ParameterStore& store, const std::string& prefix, std::size_t char_vocab, std::size_t char_dim,
                 std::size_t filters, std::size_t width, std::size_t pad_id)
    : filters_(filters), width_(width), char_dim_(char_dim), pad_(pad_id) {
    chars_ = Embedding(store, prefix + ".chars", char_vocab, char_dim, pad_id);
    weight_ = store.create(prefix + ".conv.weight", {width * char_dim, filters}, Init::xavier_uniform);
    bias_ = store.create(prefix + ".conv.bias", {filters}, Init::zeros);
}

Tensor CharCnn::operator()(const std::vector<std::vector<std::size_t>>& chars) const {
    if (chars.empty()) throw ShapeError("char_cnn: empty token sequence");
    std::size_t c_max = width_;
    for (const auto& tok : chars) c_max = std::max(c_max, tok.size());
    std::vector<std::size_t> flat;
    flat.reserve(chars.size() * c_max);
    for (const auto& tok : chars) {
        flat.insert(flat.end(), tok.begin(), tok.end());
        flat.insert(flat.end(), c_max - tok.size(), pad_);
    }
    Tensor embedded = reshape(chars_(flat), {chars.size(), c_max, char_dim_});
    return encode(embedded);
}

Tensor CharCnn::encode(const Tensor& char_embeddings) const {
    return max(conv1d(char_embeddings, weight_, bias_, width_), 1);
}

BiGru::BiGru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t layers)
    : hidden_(hidden) {
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t din = l == 0 ? in : 2 * hidden;
        for (int dir = 0; dir < 2; ++dir) {
            const std::string p = prefix + ".layer" + std::to_string(l) + (dir == 0 ? ".fwd" : ".bwd");
            Direction d;
            d.w_input = store.create(p + ".w_input", {din, 3 * hidden}, Init::recurrent_uniform);
            d.w_hidden = store.create(p + ".w_hidden", {hidden, 3 * hidden}, Init::recurrent_uniform);
            d.b_input = store.create(p + ".b_input", {3 * hidden}, Init::zeros);
            d.b_hidden = store.create(p + ".b_hidden", {3 * hidden}, Init::zeros);
            (dir == 0 ? forward_ : backward_).push_back(std::move(d));
        }
    }
}

Tensor BiGru::operator()(const Tensor& x, double dropout_p, const ForwardContext& ctx) const {
    Tensor h = x;
    for (std::size_t l = 0; l < forward_.size(); ++l) {
        Tensor in = dropout(h, dropout_p, ctx);
        const auto& f = forward_[l];
        const auto& b = backward_[l];
        Tensor fwd = gru_sequence(in, f.w_input, f.w_hidden, f.b_input, f.b_hidden, false);
        Tensor bwd = gru_sequence(in, b.w_input, b.w_hidden, b.b_input, b.b_hidden, true);
        h = concat({fwd, bwd}, 1);
    }
    return h;
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim, bool bias) {
    gain_ = store.create(prefix + ".gain", {dim}, Init::ones);
    bias_ = bias ? store.create(prefix + ".bias", {dim}, Init::zeros) : Tensor::zeros({dim});
}

FeedForward::FeedForward(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t inner)
    : inner_(store, prefix + ".inner", dim, inner), outer_(store, prefix + ".outer", inner, dim) {}

Tensor FeedForward::operator()(const Tensor& x, double dropout_p, const ForwardContext& ctx) const {
    return outer_(dropout(relu(inner_(x)), dropout_p, ctx));
}

SelfAttentionLayer::SelfAttentionLayer(ParameterStore& store, const std::string& prefix, std::size_t dim,
                                       std::size_t attn_dim, std::size_t heads, std::size_t ff_inner)
    : dim_(dim), attn_dim_(attn_dim), heads_(heads) {
    if (heads == 0 || attn_dim % heads != 0) {
        throw std::invalid_argument("attention dimension " + std::to_string(attn_dim) + " is not divisible by " +
                                    std::to_string(heads) + " heads");
    }
    query_ = Linear(store, prefix + ".query", dim, attn_dim);
    // A key bias adds the same amount to every logit of a row, which the
    // softmax cancels; it would be a parameter with identically zero gradient.
    key_ = Linear(store, prefix + ".key", dim, attn_dim, false);
    value_ = Linear(store, prefix + ".value", dim, attn_dim);
    output_ = Linear(store, prefix + ".output", attn_dim, dim);
    attn_norm_ = LayerNorm(store, prefix + ".attn_norm", dim);
    ff_ = FeedForward(store, prefix + ".ff", dim, ff_inner);
    ff_norm_ = LayerNorm(store, prefix + ".ff_norm", dim);
}

AttentionOutput SelfAttentionLayer::operator()(const Tensor& x, const std::vector<Tensor>& head_masks,
                                               double dropout_p, const ForwardContext& ctx) const {
    const std::size_t n = x.dim(0);
    if (head_masks.size() != heads_) {
        throw std::invalid_argument("expected " + std::to_string(heads_) + " head masks, got " +
                                    std::to_string(head_masks.size()));
    }
    const std::size_t dh = attn_dim_ / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = query_(x), k = key_(x), v = value_(x);

    AttentionOutput out;
    std::vector<Tensor> head_outputs;
    for (std::size_t h = 0; h < heads_; ++h) {
        if (head_masks[h].shape() != Shape{n, n}) {
            throw ShapeError("head mask " + shape_str(head_masks[h].shape()) + " does not match sequence length " +
                             std::to_string(n));
        }
        Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vh = slice(v, 1, h * dh, (h + 1) * dh);
        Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
        Tensor weights = masked_softmax(logits, head_masks[h]);
        out.attention.push_back(weights);
        head_outputs.push_back(matmul(dropout(weights, dropout_p, ctx), vh));
    }
    Tensor merged = heads_ == 1 ? head_outputs.front() : concat(head_outputs, 1);
    Tensor attended = dropout(output_(merged), dropout_p, ctx);
    Tensor x1 = attn_norm_(add(x, attended));
    Tensor fed = dropout(ff_(x1, dropout_p, ctx), dropout_p, ctx);
    out.output = ff_norm_(add(x1, fed));
    return out;
}

Tensor sinusoidal_positions(std::size_t n, std::size_t dim) {
    std::vector<double> v(n * dim);
    for (std::size_t pos = 0; pos < n; ++pos)
        for (std::size_t i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) * rate;
            v[pos * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return Tensor::from({n, dim}, std::move(v));
}

}  // namespace supattn
