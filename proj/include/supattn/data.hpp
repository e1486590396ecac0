#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "supattn/annotation.hpp"
#include "supattn/supervision.hpp"
#include "supattn/tensor.hpp"

namespace supattn {

struct Instance {
    std::string id;
    std::vector<std::string> context;
    std::vector<std::string> query;
    std::string answer;
    std::optional<Annotation> annotation;

    bool operator==(const Instance&) const = default;
};

// Positions of the answer token in the context (exact match unless lowercase).
std::vector<std::size_t> answer_positions(const Instance& instance, bool lowercase = false);
bool answer_in_context(const Instance& instance, bool lowercase = false);

// Returns an empty string for a structurally valid instance.
std::string instance_error(const Instance& instance);

// ---------------------------------------------------------------------------
// Corpus files: UTF-8, one JSON object per line (see docs/formats.md).

std::string instance_to_json_line(const Instance& instance);
// Throws std::invalid_argument describing the first schema violation.
Instance instance_from_json_line(const std::string& line);

struct CorpusError {
    std::size_t line = 0;  // 1-based
    std::string reason;
};

// Streaming reader; invalid lines are skipped and recorded in errors().
class CorpusReader {
public:
    explicit CorpusReader(const std::filesystem::path& path);
    std::optional<Instance> next();
    const std::vector<CorpusError>& errors() const { return errors_; }
    std::size_t lines_read() const { return line_no_; }

private:
    std::ifstream in_;
    std::size_t line_no_ = 0;
    std::vector<CorpusError> errors_;
};

struct CorpusLoad {
    std::vector<Instance> instances;
    std::vector<CorpusError> errors;
};

CorpusLoad load_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<Instance>& instances);

// ---------------------------------------------------------------------------

std::set<std::string> load_stopwords(const std::filesystem::path& path);

// Keeps instances whose answer occurs in the context and is not a stopword.
std::vector<Instance> filter_training(const std::vector<Instance>& instances, const std::set<std::string>& stopwords);

// Splits a UTF-8 token into code-point substrings.
std::vector<std::string> utf8_characters(const std::string& token);

class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;

    Vocabulary();

    // Words with count >= min_count get ids 2.. ordered by (count desc, token
    // asc); every other word maps to UNK. Characters follow the same order
    // with min count 1.
    static Vocabulary build(const std::vector<Instance>& instances, std::size_t min_count);

    std::size_t word_id(const std::string& token) const;
    std::size_t char_id(const std::string& ch) const;
    std::vector<std::size_t> char_ids(const std::string& token) const;
    const std::string& word(std::size_t id) const { return words_.at(id); }

    std::size_t word_count() const { return words_.size(); }
    std::size_t char_count() const { return chars_.size(); }
    std::size_t min_count() const { return min_count_; }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& other) const { return words_ == other.words_ && chars_ == other.chars_; }

private:
    std::vector<std::string> words_, chars_;
    std::unordered_map<std::string, std::size_t> word_index_, char_index_;
    std::size_t min_count_ = 1;
};

// ---------------------------------------------------------------------------

// A padded minibatch. Per-row arrays are padded to the longest context and
// query in the batch; masks are 1 exactly at real positions. Supervision
// matrices and sentence windows are sized to the padded context length, with
// empty rows (supervision) or self-only rows (windows) at pad positions.
struct Batch {
    std::size_t context_length = 0;  // padded
    std::size_t query_length = 0;    // padded
    std::vector<std::string> ids;
    std::vector<std::vector<std::string>> context_tokens;  // unpadded
    std::vector<std::vector<std::string>> query_tokens;    // unpadded
    std::vector<std::string> answers;
    std::vector<std::vector<std::size_t>> context_ids;
    std::vector<std::vector<std::size_t>> query_ids;
    std::vector<std::vector<std::vector<std::size_t>>> context_chars;
    std::vector<std::vector<std::vector<std::size_t>>> query_chars;
    std::vector<std::vector<double>> context_mask;
    std::vector<std::vector<double>> query_mask;
    std::vector<std::vector<std::size_t>> answer_positions;
    std::map<SupervisionKind, std::vector<SupervisionMatrix>> supervision;
    std::vector<Tensor> window_masks;  // present when sentence windows were requested

    std::size_t size() const { return ids.size(); }
    std::size_t context_size(std::size_t b) const;
    std::size_t query_size(std::size_t b) const;
};

struct BatchOptions {
    std::set<SupervisionKind> supervision;
    bool sentence_windows = false;
    // Training batches reject instances whose answer is absent from the context.
    bool require_answer = false;
    bool lowercase_answers = false;
    SupervisionOptions supervision_options{};
};

Batch make_batch(const std::vector<const Instance*>& instances, const Vocabulary& vocab, const BatchOptions& options);
Batch make_batch(const std::vector<Instance>& instances, const Vocabulary& vocab, const BatchOptions& options);

}  // namespace supattn
