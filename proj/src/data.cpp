#include "supattn/data.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "json.hpp"

namespace supattn {

using json = nlohmann::json;

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

json annotation_to_json(const Annotation& a) {
    json sentences = json::array();
    for (const auto& s : a.sentences) sentences.push_back({s.begin, s.end});
    json chains = json::array();
    for (const auto& chain : a.chains) {
        json mentions = json::array();
        for (const auto& m : chain) {
            json mj = {{"start", m.span.begin}, {"end", m.span.end}};
            if (m.head) mj["head"] = *m.head;
            mentions.push_back(std::move(mj));
        }
        chains.push_back(std::move(mentions));
    }
    json out = {{"sentences", sentences}, {"dep_head", a.dep_head}, {"dep_rel", a.dep_rel},
                {"pos", a.pos},           {"chains", chains}};
    if (!a.entities.empty()) out["entities"] = a.entities;
    return out;
}

template <typename T>
T field(const json& obj, const char* name) {
    auto it = obj.find(name);
    if (it == obj.end()) throw std::invalid_argument(std::string("missing field '") + name + "'");
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument(std::string("field '") + name + "' has the wrong type");
    }
}

Annotation annotation_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("annotation must be an object");
    Annotation a;
    for (const auto& s : field<json>(j, "sentences")) {
        if (!s.is_array() || s.size() != 2 || !s[0].is_number_unsigned() || !s[1].is_number_unsigned()) {
            throw std::invalid_argument("sentence spans must be [start, end] pairs of non-negative integers");
        }
        a.sentences.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});
    }
    a.dep_head = field<std::vector<std::size_t>>(j, "dep_head");
    a.dep_rel = field<std::vector<std::string>>(j, "dep_rel");
    a.pos = field<std::vector<std::string>>(j, "pos");
    for (const auto& c : field<json>(j, "chains")) {
        if (!c.is_array()) throw std::invalid_argument("each chain must be a list of mentions");
        CorefChain chain;
        for (const auto& m : c) {
            if (!m.is_object()) throw std::invalid_argument("each mention must be an object");
            Mention mention;
            mention.span = {field<std::size_t>(m, "start"), field<std::size_t>(m, "end")};
            if (m.contains("head") && !m["head"].is_null()) mention.head = field<std::size_t>(m, "head");
            chain.push_back(mention);
        }
        a.chains.push_back(std::move(chain));
    }
    if (j.contains("entities") && !j["entities"].is_null()) a.entities = field<std::vector<std::string>>(j, "entities");
    return a;
}

}  // namespace

std::vector<std::size_t> answer_positions(const Instance& instance, bool lowercase) {
    std::vector<std::size_t> out;
    const std::string target = lowercase ? lower(instance.answer) : instance.answer;
    for (std::size_t i = 0; i < instance.context.size(); ++i) {
        const auto& tok = instance.context[i];
        if ((lowercase ? lower(tok) : tok) == target) out.push_back(i);
    }
    return out;
}

bool answer_in_context(const Instance& instance, bool lowercase) {
    return !answer_positions(instance, lowercase).empty();
}

std::string instance_error(const Instance& instance) {
    if (instance.id.empty()) return "empty id";
    if (instance.context.empty()) return "empty context";
    if (instance.answer.empty()) return "empty answer";
    if (instance.annotation) {
        auto err = annotation_error(*instance.annotation, instance.context.size());
        if (!err.empty()) return "annotation: " + err;
    }
    return {};
}

std::string instance_to_json_line(const Instance& instance) {
    json j = {{"id", instance.id},
              {"context_tokens", instance.context},
              {"query_tokens", instance.query},
              {"answer", instance.answer}};
    if (instance.annotation) j["annotation"] = annotation_to_json(*instance.annotation);
    return j.dump();
}

Instance instance_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("record must be a JSON object");
    Instance inst;
    inst.id = field<std::string>(j, "id");
    inst.context = field<std::vector<std::string>>(j, "context_tokens");
    inst.query = field<std::vector<std::string>>(j, "query_tokens");
    inst.answer = field<std::string>(j, "answer");
    if (j.contains("annotation") && !j["annotation"].is_null()) inst.annotation = annotation_from_json(j["annotation"]);
    if (auto err = instance_error(inst); !err.empty()) throw std::invalid_argument(err);
    return inst;
}

CorpusReader::CorpusReader(const std::filesystem::path& path) : in_(path) {
    if (!in_) throw std::runtime_error("cannot open corpus " + path.string());
}

std::optional<Instance> CorpusReader::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_no_;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            return instance_from_json_line(line);
        } catch (const std::invalid_argument& e) {
            errors_.push_back({line_no_, e.what()});
        }
    }
    return std::nullopt;
}

CorpusLoad load_corpus(const std::filesystem::path& path) {
    CorpusReader reader(path);
    CorpusLoad out;
    while (auto inst = reader.next()) out.instances.push_back(std::move(*inst));
    out.errors = reader.errors();
    return out;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Instance>& instances) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus " + path.string());
    for (const auto& inst : instances) out << instance_to_json_line(inst) << '\n';
    if (!out) throw std::runtime_error("failed writing corpus " + path.string());
}

std::set<std::string> load_stopwords(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open stopword list " + path.string());
    std::set<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
        std::size_t start = 0;
        while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
        line = line.substr(start);
        if (!line.empty() && line[0] != '#') out.insert(line);
    }
    return out;
}

std::vector<Instance> filter_training(const std::vector<Instance>& instances, const std::set<std::string>& stopwords) {
    std::vector<Instance> out;
    for (const auto& inst : instances) {
        if (stopwords.count(inst.answer)) continue;
        if (!answer_in_context(inst)) continue;
        out.push_back(inst);
    }
    return out;
}

std::vector<std::string> utf8_characters(const std::string& token) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < token.size()) {
        const auto lead = static_cast<unsigned char>(token[i]);
        std::size_t len = 1;
        if (lead >= 0xF0) len = 4;
        else if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        len = std::min(len, token.size() - i);
        out.push_back(token.substr(i, len));
        i += len;
    }
    return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
    words_ = {"<pad>", "<unk>"};
    chars_ = {"<pad>", "<unk>"};
    for (std::size_t i = 0; i < 2; ++i) {
        word_index_[words_[i]] = i;
        char_index_[chars_[i]] = i;
    }
}

namespace {
std::vector<std::string> ranked(const std::map<std::string, std::size_t>& counts, std::size_t min_count) {
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> out;
    for (const auto& [tok, c] : items)
        if (c >= min_count) out.push_back(tok);
    return out;
}
}  // namespace

Vocabulary Vocabulary::build(const std::vector<Instance>& instances, std::size_t min_count) {
    if (instances.empty()) throw std::invalid_argument("cannot build a vocabulary from no instances");
    std::map<std::string, std::size_t> word_counts, char_counts;
    auto count = [&](const std::string& tok) {
        ++word_counts[tok];
        for (const auto& ch : utf8_characters(tok)) ++char_counts[ch];
    };
    for (const auto& inst : instances) {
        for (const auto& t : inst.context) count(t);
        for (const auto& t : inst.query) count(t);
        count(inst.answer);
    }
    Vocabulary v;
    v.min_count_ = std::max<std::size_t>(min_count, 1);
    for (auto& w : ranked(word_counts, v.min_count_)) {
        if (v.word_index_.count(w)) continue;
        v.word_index_[w] = v.words_.size();
        v.words_.push_back(w);
    }
    for (auto& c : ranked(char_counts, 1)) {
        if (v.char_index_.count(c)) continue;
        v.char_index_[c] = v.chars_.size();
        v.chars_.push_back(c);
    }
    return v;
}

std::size_t Vocabulary::word_id(const std::string& token) const {
    auto it = word_index_.find(token);
    return it == word_index_.end() ? kUnk : it->second;
}

std::size_t Vocabulary::char_id(const std::string& ch) const {
    auto it = char_index_.find(ch);
    return it == char_index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::char_ids(const std::string& token) const {
    std::vector<std::size_t> out;
    for (const auto& ch : utf8_characters(token)) out.push_back(char_id(ch));
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
    json j = {{"format", "supattn-vocab"}, {"version", 1}, {"min_count", min_count_}, {"words", words_}, {"chars", chars_}};
    out << j.dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
    json j = json::parse(in);
    if (j.value("format", "") != "supattn-vocab") throw std::runtime_error(path.string() + " is not a vocabulary file");
    Vocabulary v;
    v.words_ = j.at("words").get<std::vector<std::string>>();
    v.chars_ = j.at("chars").get<std::vector<std::string>>();
    v.min_count_ = j.value("min_count", std::size_t{1});
    if (v.words_.size() < 2 || v.chars_.size() < 2) throw std::runtime_error("vocabulary lacks reserved entries");
    v.word_index_.clear();
    v.char_index_.clear();
    for (std::size_t i = 0; i < v.words_.size(); ++i) v.word_index_[v.words_[i]] = i;
    for (std::size_t i = 0; i < v.chars_.size(); ++i) v.char_index_[v.chars_[i]] = i;
    return v;
}

// ---------------------------------------------------------------------------

std::size_t Batch::context_size(std::size_t b) const {
    return static_cast<std::size_t>(std::count(context_mask.at(b).begin(), context_mask.at(b).end(), 1.0));
}

std::size_t Batch::query_size(std::size_t b) const {
    return static_cast<std::size_t>(std::count(query_mask.at(b).begin(), query_mask.at(b).end(), 1.0));
}

Batch make_batch(const std::vector<const Instance*>& instances, const Vocabulary& vocab, const BatchOptions& options) {
    if (instances.empty()) throw std::invalid_argument("make_batch: no instances");
    Batch batch;
    for (const auto* inst : instances) {
        batch.context_length = std::max(batch.context_length, inst->context.size());
        batch.query_length = std::max(batch.query_length, inst->query.size());
    }
    batch.query_length = std::max<std::size_t>(batch.query_length, 1);
    const bool needs_annotation = !options.supervision.empty() || options.sentence_windows;

    for (const auto* inst : instances) {
        const auto& x = *inst;
        const std::size_t n = x.context.size(), m = x.query.size();
        if (needs_annotation && !x.annotation) {
            throw std::invalid_argument("instance " + x.id + " has no annotation but supervision was requested");
        }
        auto positions = answer_positions(x, options.lowercase_answers);
        if (options.require_answer && positions.empty()) {
            throw std::invalid_argument("training instance " + x.id + " does not contain its answer");
        }
        batch.ids.push_back(x.id);
        batch.context_tokens.push_back(x.context);
        batch.query_tokens.push_back(x.query);
        batch.answers.push_back(x.answer);
        batch.answer_positions.push_back(std::move(positions));

        std::vector<std::size_t> cids(batch.context_length, Vocabulary::kPad);
        std::vector<std::vector<std::size_t>> cchars(batch.context_length);
        std::vector<double> cmask(batch.context_length, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            cids[i] = vocab.word_id(x.context[i]);
            cchars[i] = vocab.char_ids(x.context[i]);
            cmask[i] = 1.0;
        }
        std::vector<std::size_t> qids(batch.query_length, Vocabulary::kPad);
        std::vector<std::vector<std::size_t>> qchars(batch.query_length);
        std::vector<double> qmask(batch.query_length, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            qids[i] = vocab.word_id(x.query[i]);
            qchars[i] = vocab.char_ids(x.query[i]);
            qmask[i] = 1.0;
        }
        batch.context_ids.push_back(std::move(cids));
        batch.context_chars.push_back(std::move(cchars));
        batch.context_mask.push_back(std::move(cmask));
        batch.query_ids.push_back(std::move(qids));
        batch.query_chars.push_back(std::move(qchars));
        batch.query_mask.push_back(std::move(qmask));

        for (auto kind : options.supervision) {
            auto s = build_supervision(kind, *x.annotation, options.supervision_options);
            batch.supervision[kind].push_back(s.padded(batch.context_length));
        }
        if (options.sentence_windows) {
            const std::size_t N = batch.context_length;
            Tensor window = sentence_window_mask(*x.annotation);
            std::vector<double> padded(N * N, 0.0);
            auto src = window.data();
            for (std::size_t i = 0; i < N; ++i) {
                if (i >= n) {
                    padded[i * N + i] = 1.0;
                    continue;
                }
                for (std::size_t j = 0; j < n; ++j) padded[i * N + j] = src[i * n + j];
            }
            batch.window_masks.push_back(Tensor::from({N, N}, std::move(padded)));
        }
    }
    return batch;
}

Batch make_batch(const std::vector<Instance>& instances, const Vocabulary& vocab, const BatchOptions& options) {
    std::vector<const Instance*> ptrs;
    for (const auto& i : instances) ptrs.push_back(&i);
    return make_batch(ptrs, vocab, options);
}

}  // namespace supattn
