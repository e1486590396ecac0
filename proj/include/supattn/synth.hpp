#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "supattn/data.hpp"

namespace supattn {

// Template stories with gold annotation. Each entity is introduced by name,
// then later events refer to it by pronoun. The query names one pronoun
// event ("the one who VERB the OBJ was") and the answer is the entity's name,
// so answering needs the pronoun resolved to its antecedent.
struct SynthOptions {
    std::size_t min_entities = 2;
    std::size_t max_entities = 4;
    std::size_t max_pronoun_events = 3;  // per entity that is referred to by pronoun
    std::size_t max_name_events = 1;     // extra named events per entity
    // Chance that an event of a pronoun-referred entity uses the pronoun
    // rather than the name; 0 removes the need to resolve anything.
    double pronoun_rate = 1.0;
};

std::vector<Instance> synth_generate(std::size_t count, std::uint64_t seed, const SynthOptions& options = {});

// The answer token of the entity with the most mentions (ties: earliest
// mention), a baseline that ignores the query.
std::string majority_prediction(const Instance& instance);

}  // namespace supattn
