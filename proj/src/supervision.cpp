#include "supattn/supervision.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace supattn {

std::string_view to_string(SupervisionKind kind) {
    switch (kind) {
        case SupervisionKind::dep_parse: return "DepParse";
        case SupervisionKind::coref_all: return "CorefAll";
        case SupervisionKind::coref_prev: return "CorefPrev";
        case SupervisionKind::coref_next: return "CorefNext";
        case SupervisionKind::narrative: return "Narrative";
    }
    return "?";
}

std::optional<SupervisionKind> parse_supervision_kind(std::string_view name) {
    auto lower = [](std::string_view s) {
        std::string out(s);
        for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return out;
    };
    const std::string wanted = lower(name);
    for (auto kind : kAllSupervisionKinds) {
        if (lower(to_string(kind)) == wanted) return kind;
    }
    return std::nullopt;
}

std::size_t SupervisionMatrix::k() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.empty(); }));
}

std::size_t SupervisionMatrix::nonzeros() const {
    std::size_t total = 0;
    for (const auto& r : rows) total += r.size();
    return total;
}

bool SupervisionMatrix::at(std::size_t i, std::size_t j) const {
    const auto& r = rows.at(i);
    return std::binary_search(r.begin(), r.end(), j);
}

bool SupervisionMatrix::symmetric() const {
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (auto j : rows[i])
            if (!at(j, i)) return false;
    return true;
}

Tensor SupervisionMatrix::dense() const {
    const std::size_t n = rows.size();
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (auto j : rows[i]) v[i * n + j] = 1.0;
    return Tensor::from({n, n}, std::move(v));
}

SupervisionMatrix SupervisionMatrix::padded(std::size_t n) const {
    if (n < rows.size()) throw std::invalid_argument("cannot pad a supervision matrix to a smaller size");
    SupervisionMatrix out = *this;
    out.rows.resize(n);
    return out;
}

bool is_verb_tag(const std::string& pos, const SupervisionOptions& options) {
    return options.verb_tags.count(pos) != 0 || pos.rfind("VB", 0) == 0;
}

std::size_t mention_head(const Mention& mention, const Annotation& annotation) {
    const auto& span = mention.span;
    if (span.end <= span.begin) throw std::invalid_argument("mention_head: empty span");
    if (span.end > annotation.dep_head.size()) throw std::invalid_argument("mention_head: span outside annotation");
    if (mention.head) return *mention.head;
    for (std::size_t i = span.begin; i < span.end; ++i) {
        const auto h = annotation.dep_head[i];
        if (h == i || !span.contains(h)) return i;
    }
    return span.end - 1;
}

std::vector<std::size_t> chain_heads(const CorefChain& chain, const Annotation& annotation) {
    std::vector<std::size_t> heads;
    heads.reserve(chain.size());
    for (const auto& m : chain) heads.push_back(mention_head(m, annotation));
    std::sort(heads.begin(), heads.end());
    heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
    return heads;
}

namespace {

SupervisionMatrix empty_matrix(SupervisionKind kind, std::size_t n) {
    SupervisionMatrix m;
    m.kind = kind;
    m.rows.assign(n, {});
    return m;
}

void normalize(SupervisionMatrix& m) {
    for (auto& r : m.rows) {
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
    }
}

std::size_t context_length(const Annotation& a) { return a.sentences.empty() ? 0 : a.sentences.back().end; }

}  // namespace

SupervisionMatrix build_depparse(const Annotation& annotation) {
    const std::size_t n = context_length(annotation);
    auto m = empty_matrix(SupervisionKind::dep_parse, n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto head = annotation.dep_head.at(i);
        if (head >= n || sentence_of(annotation, head) != sentence_of(annotation, i)) {
            throw std::invalid_argument("dependency head of token " + std::to_string(i) + " leaves its sentence");
        }
        m.rows[i].push_back(head);  // roots point at themselves
    }
    return m;
}

SupervisionMatrix build_corefall(const Annotation& annotation) {
    auto m = empty_matrix(SupervisionKind::coref_all, context_length(annotation));
    for (const auto& chain : annotation.chains) {
        auto heads = chain_heads(chain, annotation);
        for (auto a : heads)
            for (auto b : heads)
                if (a != b) m.rows[a].push_back(b);
    }
    normalize(m);
    return m;
}

SupervisionMatrix build_corefprev(const Annotation& annotation) {
    auto m = empty_matrix(SupervisionKind::coref_prev, context_length(annotation));
    for (const auto& chain : annotation.chains) {
        auto heads = chain_heads(chain, annotation);
        for (std::size_t i = 1; i < heads.size(); ++i) m.rows[heads[i]].push_back(heads[i - 1]);
    }
    normalize(m);
    return m;
}

SupervisionMatrix build_corefnext(const Annotation& annotation) {
    auto m = empty_matrix(SupervisionKind::coref_next, context_length(annotation));
    for (const auto& chain : annotation.chains) {
        auto heads = chain_heads(chain, annotation);
        for (std::size_t i = 0; i + 1 < heads.size(); ++i) m.rows[heads[i]].push_back(heads[i + 1]);
    }
    normalize(m);
    return m;
}

SupervisionMatrix build_narrative(const Annotation& annotation, const SupervisionOptions& options) {
    auto m = empty_matrix(SupervisionKind::narrative, context_length(annotation));
    for (const auto& chain : annotation.chains) {
        // Arguments of this chain and the predicates governing them.
        std::vector<std::size_t> arguments, predicates;
        for (auto head : chain_heads(chain, annotation)) {
            const auto gov = annotation.dep_head[head];
            if (gov == head) continue;
            if (!options.argument_relations.count(annotation.dep_rel[head])) continue;
            if (!is_verb_tag(annotation.pos[gov], options)) continue;
            arguments.push_back(head);
            predicates.push_back(gov);
        }
        for (auto a : arguments)
            for (auto p : predicates) {
                m.rows[a].push_back(p);
                m.rows[p].push_back(a);
            }
    }
    normalize(m);
    return m;
}

SupervisionMatrix build_supervision(SupervisionKind kind, const Annotation& annotation,
                                    const SupervisionOptions& options) {
    switch (kind) {
        case SupervisionKind::dep_parse: return build_depparse(annotation);
        case SupervisionKind::coref_all: return build_corefall(annotation);
        case SupervisionKind::coref_prev: return build_corefprev(annotation);
        case SupervisionKind::coref_next: return build_corefnext(annotation);
        case SupervisionKind::narrative: return build_narrative(annotation, options);
    }
    throw std::invalid_argument("unknown supervision kind");
}

Tensor sentence_window_mask(const Annotation& annotation) {
    const std::size_t n = context_length(annotation);
    if (n == 0) throw std::invalid_argument("sentence_window_mask: annotation has no sentences");
    std::vector<double> v(n * n, 0.0);
    for (const auto& s : annotation.sentences)
        for (auto i = s.begin; i < s.end; ++i)
            for (auto j = s.begin; j < s.end; ++j) v[i * n + j] = 1.0;
    return Tensor::from({n, n}, std::move(v));
}

}  // namespace supattn
