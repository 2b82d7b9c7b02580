#pragma once

#include "headsteer/model.hpp"
#include "headsteer/sampling.hpp"
#include "headsteer/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace headsteer {

struct Continuation {
    std::string text;
    std::vector<std::int32_t> tokens;
    double seconds = 0.0;
    /// Stopped early because the context window filled up.
    bool overflow = false;
};

struct GenerationRecord {
    std::string prompt;
    std::vector<Continuation> continuations;
    SamplingConfig sampling;
    /// Free-form description of the fusion applied (alpha, policy, ...).
    nlohmann::ordered_json fusion = nlohmann::ordered_json::object();
    double prompt_seconds = 0.0;

    double total_seconds() const;
};

/// Samples `sampling.n_continuations` continuations of `prompt` (prefixed with
/// BOS). Each continuation draws from its own stream derived from
/// (sampling.seed, index); `interventions` may be null. Timing fields are
/// wall-clock and are the only non-deterministic outputs.
GenerationRecord steered_generate(const Model& model, const Tokenizer& tokenizer,
                                  const InterventionMap* interventions, const std::string& prompt,
                                  const SamplingConfig& sampling, unsigned jobs = 1);

nlohmann::ordered_json to_json(const SamplingConfig& s);
SamplingConfig sampling_from_json(const nlohmann::json& j);

/// `with_timing=false` omits wall-clock fields so files are byte-stable.
nlohmann::ordered_json to_json(const GenerationRecord& r, bool with_timing = true);
GenerationRecord record_from_json(const nlohmann::json& j);

void write_records(const std::filesystem::path& path, const std::vector<GenerationRecord>& records,
                   bool with_timing = true);
/// Throws std::runtime_error naming the offending line on schema violations.
std::vector<GenerationRecord> read_records(const std::filesystem::path& path);

/// Wall-clock sidecar: one line per record with prompt_seconds and per-continuation seconds.
void write_timing(const std::filesystem::path& path, const std::vector<GenerationRecord>& records);
/// Fills timing fields from a sidecar written for the same records.
void apply_timing(const std::filesystem::path& path, std::vector<GenerationRecord>& records);

}  // namespace headsteer
