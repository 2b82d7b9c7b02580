#pragma once

// Toxicity, fluency, and diversity metrics over generated continuations.

#include "headsteer/generation.hpp"
#include "headsteer/model.hpp"
#include "headsteer/tokenizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace headsteer {

/// scores[prompt][continuation]
using ScoreMatrix = std::vector<std::vector<double>>;

/// Mean over prompts of the per-prompt maximum.
double emt(const ScoreMatrix& scores);
/// Fraction of prompts with at least one score above `threshold`.
double tp(const ScoreMatrix& scores, double threshold = 0.5);

struct PplInput {
    std::string prompt;
    std::string continuation;
};

/// exp(mean NLL) over continuation tokens, conditioned on BOS + prompt.
double ppl(const Model& reference, const Tokenizer& tokenizer, const std::vector<PplInput>& texts, unsigned jobs = 1);

struct DistinctResult {
    double value = 0.0;
    /// groups whose continuations were all shorter than n tokens
    std::vector<std::size_t> short_groups;
};

/// Per group: distinct n-grams / total n-grams over whitespace tokens; mean over groups.
DistinctResult dist_n(const std::vector<std::vector<std::string>>& groups, std::size_t n);

struct MetricBundle {
    double emt = 0.0;
    double tp = 0.0;
    double mean_score = 0.0;
    double ppl = 0.0;
    double dist1 = 0.0, dist2 = 0.0, dist3 = 0.0;
    std::size_t n_prompts = 0;
    std::size_t n_continuations = 0;
};

nlohmann::ordered_json to_json(const MetricBundle& m);
MetricBundle metric_bundle_from_json(const nlohmann::json& j);

struct MemorySpec {
    std::uint64_t n_layers = 0;
    std::uint64_t n_heads = 0;
    std::uint64_t d_head = 0;
    std::uint64_t bytes_per_value = 4;
};

struct MemoryFootprint {
    std::uint64_t per_head_bytes = 0;
    std::uint64_t total_bytes = 0;
    double total_kib() const { return static_cast<double>(total_bytes) / 1024.0; }
};

/// TM = N_l * N_h * D_h * B.
MemoryFootprint memory_footprint(const MemorySpec& spec);

struct TimingReport {
    double base_seconds = 0.0;
    double steered_seconds = 0.0;
    double ratio = 1.0;
    std::vector<double> per_prompt_ratio;
};

/// Ratio of total wall-clock (steered / base) over prompt-matched records.
TimingReport timing_report(const std::vector<GenerationRecord>& base, const std::vector<GenerationRecord>& steered);

struct SweepPoint {
    double alpha = 0.0;
    double toxicity = 0.0;
    double ppl = 0.0;
};

struct TradeoffPoint {
    double alpha = 0.0;
    double strength = 0.0;  // base toxicity minus steered toxicity
    double toxicity = 0.0;
    double ppl = 0.0;
};

/// Points sorted by alpha; the base toxicity is taken from the alpha == 0 point
/// when present, otherwise from `base_toxicity`.
std::vector<TradeoffPoint> tradeoff_curve(std::vector<SweepPoint> sweep, std::optional<double> base_toxicity = std::nullopt);

void write_tradeoff_csv(const std::filesystem::path& path, const std::vector<TradeoffPoint>& points);
std::vector<TradeoffPoint> read_tradeoff_csv(const std::filesystem::path& path);

}  // namespace headsteer
