#include "supattn/synth.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

namespace supattn {

namespace {

enum class Kind { male, female, neuter };

constexpr std::array kMaleNames{"John", "Tom", "Peter", "Mark", "Paul", "David", "James", "Henry"};
constexpr std::array kFemaleNames{"Mary", "Anna", "Susan", "Emma", "Kate", "Alice", "Laura", "Grace"};
constexpr std::array kAnimals{"dog", "cat", "horse", "bird"};
constexpr std::array kVerbs{"found", "painted", "opened", "lost", "cleaned", "carried", "bought", "dropped", "moved", "hid"};
constexpr std::array kObjects{"box", "door", "book", "chair", "lamp", "basket", "letter", "key", "cup", "map"};

struct Entity {
    Kind kind;
    std::string name;  // answer token; for animals the head noun
    bool uses_pronoun = false;
    std::vector<std::pair<std::size_t, std::size_t>> pronoun_events;  // (verb, object)
};

// Portable draws so a seed yields the same corpus under any standard library.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw(rng, i)]);
}

const char* pronoun(Kind k) { return k == Kind::male ? "he" : k == Kind::female ? "she" : "it"; }

class StoryWriter {
public:
    explicit StoryWriter(std::size_t entities) : chains_(entities) {}

    // "SUBJ VERB the OBJ ." where SUBJ is a name, "the ANIMAL" or a pronoun.
    void sentence(const Entity& e, std::size_t entity, bool by_pronoun, std::size_t verb, std::size_t object) {
        const std::size_t start = tokens_.size();
        std::size_t subject;
        Mention mention;
        if (by_pronoun) {
            subject = push(pronoun(e.kind), "PRP", "O");
            mention = {{subject, subject + 1}, subject};
        } else if (e.kind == Kind::neuter) {
            const std::size_t det = push("the", "DT", "O");
            subject = push(e.name, "NN", "O");
            link(det, subject, "det");
            mention = {{det, subject + 1}, subject};
        } else {
            subject = push(e.name, "NNP", "PERSON");
            mention = {{subject, subject + 1}, subject};
        }
        const std::size_t v = push(kVerbs[verb], "VBD", "O");
        const std::size_t det = push("the", "DT", "O");
        const std::size_t obj = push(kObjects[object], "NN", "O");
        const std::size_t stop = push(".", ".", "O");
        link(subject, v, "nsubj");
        link(v, v, "root");
        link(det, obj, "det");
        link(obj, v, "dobj");
        link(stop, v, "punct");
        annotation_.sentences.push_back({start, tokens_.size()});
        chains_[entity].push_back(mention);
    }

    Instance finish(std::string id, std::vector<std::string> query, std::string answer) {
        for (auto& chain : chains_)
            if (!chain.empty()) annotation_.chains.push_back(std::move(chain));
        Instance inst;
        inst.id = std::move(id);
        inst.context = std::move(tokens_);
        inst.query = std::move(query);
        inst.answer = std::move(answer);
        inst.annotation = std::move(annotation_);
        return inst;
    }

private:
    std::size_t push(const std::string& token, const char* pos, const char* entity) {
        tokens_.push_back(token);
        annotation_.pos.emplace_back(pos);
        annotation_.entities.emplace_back(entity);
        annotation_.dep_head.push_back(tokens_.size() - 1);
        annotation_.dep_rel.emplace_back("");
        return tokens_.size() - 1;
    }
    void link(std::size_t dependent, std::size_t head, const char* rel) {
        annotation_.dep_head[dependent] = head;
        annotation_.dep_rel[dependent] = rel;
    }

    std::vector<std::string> tokens_;
    Annotation annotation_;
    std::vector<CorefChain> chains_;
};

Instance generate_one(std::size_t index, std::mt19937_64& rng, const SynthOptions& options) {
    const std::size_t count = options.min_entities + draw(rng, options.max_entities - options.min_entities + 1);

    std::vector<Entity> entities;
    std::set<std::string> used_names;
    std::set<Kind> pronoun_taken;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t roll = draw(rng, 5);
        const Kind kind = roll < 2 ? Kind::male : roll < 4 ? Kind::female : Kind::neuter;
        std::string name;
        do {
            name = kind == Kind::male     ? kMaleNames[draw(rng, kMaleNames.size())]
                   : kind == Kind::female ? kFemaleNames[draw(rng, kFemaleNames.size())]
                                          : kAnimals[draw(rng, kAnimals.size())];
        } while (!used_names.insert(name).second);
        Entity e{kind, name, false, {}};
        // Only the first entity of each pronoun class is ever referred to by
        // pronoun, so every pronoun has exactly one antecedent.
        e.uses_pronoun = pronoun_taken.insert(kind).second;
        entities.push_back(std::move(e));
    }

    std::set<std::pair<std::size_t, std::size_t>> used_events;
    auto fresh_event = [&] {
        std::pair<std::size_t, std::size_t> ev;
        do {
            ev = {draw(rng, kVerbs.size()), draw(rng, kObjects.size())};
        } while (!used_events.insert(ev).second);
        return ev;
    };

    struct Event {
        std::size_t entity;
        bool by_pronoun;
        std::pair<std::size_t, std::size_t> what;
    };
    std::vector<Event> intros, later;
    for (std::size_t i = 0; i < entities.size(); ++i) {
        intros.push_back({i, false, fresh_event()});
        if (entities[i].uses_pronoun) {
            const std::size_t n = 1 + draw(rng, options.max_pronoun_events);
            for (std::size_t k = 0; k < n; ++k) {
                auto ev = fresh_event();
                entities[i].pronoun_events.push_back(ev);
                const bool by_pronoun = options.pronoun_rate >= 1.0 ||
                                        static_cast<double>(rng() >> 11) * 0x1.0p-53 < options.pronoun_rate;
                later.push_back({i, by_pronoun, ev});
            }
        }
        const std::size_t named = draw(rng, options.max_name_events + 1);
        for (std::size_t k = 0; k < named; ++k) later.push_back({i, false, fresh_event()});
    }
    shuffle(later, rng);

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < entities.size(); ++i)
        if (entities[i].uses_pronoun) candidates.push_back(i);
    const Entity& target = entities[candidates[draw(rng, candidates.size())]];
    const auto [verb, object] = target.pronoun_events[draw(rng, target.pronoun_events.size())];

    StoryWriter writer(entities.size());
    for (const auto& ev : intros) writer.sentence(entities[ev.entity], ev.entity, false, ev.what.first, ev.what.second);
    for (const auto& ev : later) writer.sentence(entities[ev.entity], ev.entity, ev.by_pronoun, ev.what.first, ev.what.second);

    std::vector<std::string> query{"the", "one", "who", kVerbs[verb], "the", kObjects[object], "was"};
    return writer.finish("synth-" + std::to_string(index), std::move(query), target.name);
}

}  // namespace

std::vector<Instance> synth_generate(std::size_t count, std::uint64_t seed, const SynthOptions& options) {
    if (count == 0) throw std::invalid_argument("synth_generate: count must be at least 1");
    if (options.min_entities < 2 || options.max_entities < options.min_entities || options.max_pronoun_events == 0) {
        throw std::invalid_argument("synth_generate: need 2 <= min_entities <= max_entities and max_pronoun_events >= 1");
    }
    if (options.max_entities > kAnimals.size() || options.max_entities > kMaleNames.size()) {
        throw std::invalid_argument("synth_generate: at most " + std::to_string(kAnimals.size()) + " entities");
    }
    std::mt19937_64 rng(seed);
    std::vector<Instance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(i, rng, options));
    return out;
}

std::string majority_prediction(const Instance& instance) {
    if (!instance.annotation || instance.annotation->chains.empty()) {
        throw std::invalid_argument("majority_prediction: instance " + instance.id + " has no chains");
    }
    const CorefChain* best = nullptr;
    for (const auto& chain : instance.annotation->chains)
        if (!best || chain.size() > best->size()) best = &chain;
    const Mention& first = best->front();
    return instance.context[first.head.value_or(first.span.end - 1)];
}

}  // namespace supattn
