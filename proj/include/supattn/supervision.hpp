#pragma once

// Attention-target matrices derived from dependency parses and coreference
// chains, plus the sentence-window mask used for syntax-supervised heads.

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "supattn/annotation.hpp"
#include "supattn/tensor.hpp"

namespace supattn {

enum class SupervisionKind { dep_parse, coref_all, coref_prev, coref_next, narrative };

inline constexpr SupervisionKind kAllSupervisionKinds[] = {
    SupervisionKind::dep_parse, SupervisionKind::coref_all, SupervisionKind::coref_prev,
    SupervisionKind::coref_next, SupervisionKind::narrative};

// Canonical names: DepParse, CorefAll, CorefPrev, CorefNext, Narrative.
std::string_view to_string(SupervisionKind kind);
// Accepts canonical names case-insensitively.
std::optional<SupervisionKind> parse_supervision_kind(std::string_view name);

// Binary n x n matrix stored as sorted, duplicate-free column lists per row.
struct SupervisionMatrix {
    SupervisionKind kind = SupervisionKind::coref_all;
    std::vector<std::vector<std::size_t>> rows;

    std::size_t size() const { return rows.size(); }
    // Number of rows holding at least one target.
    std::size_t k() const;
    std::size_t nonzeros() const;
    bool at(std::size_t i, std::size_t j) const;
    bool symmetric() const;
    Tensor dense() const;
    // Grows the matrix to n x n with empty rows; n must not shrink it.
    SupervisionMatrix padded(std::size_t n) const;

    bool operator==(const SupervisionMatrix&) const = default;
};

struct SupervisionOptions {
    std::set<std::string> argument_relations{"nsubj", "nsubjpass", "dobj", "obj", "iobj"};
    // A POS tag marks a predicate when it is listed here or starts with "VB".
    std::set<std::string> verb_tags{"VERB"};
};

bool is_verb_tag(const std::string& pos, const SupervisionOptions& options);

// Head token of a mention span: a precomputed head wins; otherwise the
// leftmost token whose dependency head lies outside the span or which is a
// root; otherwise the last token.
std::size_t mention_head(const Mention& mention, const Annotation& annotation);

// Distinct mention heads of a chain in ascending token order.
std::vector<std::size_t> chain_heads(const CorefChain& chain, const Annotation& annotation);

SupervisionMatrix build_depparse(const Annotation& annotation);
SupervisionMatrix build_corefall(const Annotation& annotation);
SupervisionMatrix build_corefprev(const Annotation& annotation);
SupervisionMatrix build_corefnext(const Annotation& annotation);
SupervisionMatrix build_narrative(const Annotation& annotation, const SupervisionOptions& options = {});
SupervisionMatrix build_supervision(SupervisionKind kind, const Annotation& annotation,
                                    const SupervisionOptions& options = {});

// (n, n) with 1 where both tokens share a sentence.
Tensor sentence_window_mask(const Annotation& annotation);

}  // namespace supattn
