#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace supattn {

struct TokenSpan {
    std::size_t begin = 0;  // half-open [begin, end)
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const TokenSpan&) const = default;
};

struct Mention {
    TokenSpan span;
    std::optional<std::size_t> head;  // precomputed head token, if the pipeline supplied one

    bool operator==(const Mention&) const = default;
};

using CorefChain = std::vector<Mention>;

// Linguistic annotation of a context. Roots point at themselves in dep_head.
struct Annotation {
    std::vector<TokenSpan> sentences;
    std::vector<std::size_t> dep_head;
    std::vector<std::string> dep_rel;
    std::vector<std::string> pos;
    std::vector<CorefChain> chains;
    std::vector<std::string> entities;  // optional per-token labels, e.g. PERSON / O

    bool operator==(const Annotation&) const = default;
};

// Returns an empty string for a valid annotation of an n-token context,
// otherwise a description of the first violated invariant.
std::string annotation_error(const Annotation& annotation, std::size_t n);

// Throws std::invalid_argument with annotation_error() when invalid.
void validate_annotation(const Annotation& annotation, std::size_t n);

// Index of the sentence containing token i.
std::size_t sentence_of(const Annotation& annotation, std::size_t i);

}  // namespace supattn
