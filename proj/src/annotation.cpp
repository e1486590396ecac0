#include "supattn/annotation.hpp"

#include <algorithm>
#include <stdexcept>

namespace supattn {

std::string annotation_error(const Annotation& a, std::size_t n) {
    if (n == 0) return "context is empty";
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < a.sentences.size(); ++s) {
        const auto& span = a.sentences[s];
        if (span.begin != cursor || span.end <= span.begin) {
            return "sentence " + std::to_string(s) + " [" + std::to_string(span.begin) + ", " +
                   std::to_string(span.end) + ") does not continue from token " + std::to_string(cursor);
        }
        cursor = span.end;
    }
    if (cursor != n) return "sentence spans cover " + std::to_string(cursor) + " of " + std::to_string(n) + " tokens";
    if (a.dep_head.size() != n) return "dep_head has " + std::to_string(a.dep_head.size()) + " entries, expected " + std::to_string(n);
    if (a.dep_rel.size() != n) return "dep_rel has " + std::to_string(a.dep_rel.size()) + " entries, expected " + std::to_string(n);
    if (a.pos.size() != n) return "pos has " + std::to_string(a.pos.size()) + " entries, expected " + std::to_string(n);
    if (!a.entities.empty() && a.entities.size() != n) {
        return "entities has " + std::to_string(a.entities.size()) + " entries, expected " + std::to_string(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto head = a.dep_head[i];
        if (head >= n) return "dep_head of token " + std::to_string(i) + " is out of range";
        if (sentence_of(a, head) != sentence_of(a, i)) {
            return "dep_head of token " + std::to_string(i) + " crosses a sentence boundary";
        }
    }
    for (std::size_t c = 0; c < a.chains.size(); ++c) {
        if (a.chains[c].empty()) return "chain " + std::to_string(c) + " has no mentions";
        for (const auto& m : a.chains[c]) {
            if (m.span.end <= m.span.begin || m.span.end > n) {
                return "mention [" + std::to_string(m.span.begin) + ", " + std::to_string(m.span.end) +
                       ") in chain " + std::to_string(c) + " lies outside the context";
            }
            if (sentence_of(a, m.span.begin) != sentence_of(a, m.span.end - 1)) {
                return "mention [" + std::to_string(m.span.begin) + ", " + std::to_string(m.span.end) +
                       ") in chain " + std::to_string(c) + " spans two sentences";
            }
            if (m.head && !m.span.contains(*m.head)) {
                return "mention head " + std::to_string(*m.head) + " lies outside its span in chain " +
                       std::to_string(c);
            }
        }
    }
    return {};
}

void validate_annotation(const Annotation& annotation, std::size_t n) {
    if (auto err = annotation_error(annotation, n); !err.empty()) throw std::invalid_argument(err);
}

std::size_t sentence_of(const Annotation& a, std::size_t i) {
    auto it = std::upper_bound(a.sentences.begin(), a.sentences.end(), i,
                               [](std::size_t v, const TokenSpan& s) { return v < s.end; });
    if (it == a.sentences.end() || !it->contains(i)) {
        throw std::out_of_range("token " + std::to_string(i) + " is not inside any sentence");
    }
    return static_cast<std::size_t>(it - a.sentences.begin());
}

}  // namespace supattn
