#pragma once

// Run configuration for steerctl: one JSON document, paths resolved against
// the document's directory, per-command overrides applied from flags.

#include "headsteer/pairs.hpp"
#include "headsteer/sampling.hpp"
#include "headsteer/scoring.hpp"
#include "headsteer/steer.hpp"
#include "headsteer/vectors.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerctl {

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct PairStage {
    std::size_t count = 200;
    std::size_t k = 25;
    double epsilon = 0.7;
    std::string toxic_cue;
    std::string nontoxic_cue;
    headsteer::SamplingConfig sampling;
};

struct VectorStage {
    std::size_t m = headsteer::kDefaultPairCount;
    headsteer::CaptureOptions capture;
    headsteer::ProbeTrainConfig probe;
};

struct SteerStage {
    std::filesystem::path prompts;
    headsteer::SamplingConfig sampling;
};

struct SweepStage {
    std::vector<double> alphas{std::begin(headsteer::kAlphaSweep), std::end(headsteer::kAlphaSweep)};
    std::vector<std::size_t> m_values{5, 10, 20};
    std::vector<headsteer::HeadPolicy> policies{headsteer::HeadPolicy::uniform, headsteer::HeadPolicy::all,
                                                headsteer::HeadPolicy::top_half, headsteer::HeadPolicy::bottom_half};
};

struct RunConfig {
    std::filesystem::path base_model;
    std::filesystem::path reference_model;
    std::filesystem::path tokenizer;
    std::filesystem::path lexicon;
    std::filesystem::path output_dir;
    std::uint64_t seed = 1;
    unsigned jobs = 1;
    headsteer::ScorerConfig scorer;
    headsteer::RephraserConfig rephraser;
    std::optional<std::filesystem::path> substitutions;
    PairStage pairs;
    VectorStage vectors;
    headsteer::FusionConfig fusion;
    SteerStage steer;
    SweepStage sweep;

    /// Every referenced input file must exist.
    void validate() const;
};

/// Reads a config document, or the "config" member of a run manifest.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
/// Fully resolved form; replaying it reproduces the run.
nlohmann::ordered_json to_json(const RunConfig& c);

}  // namespace steerctl
