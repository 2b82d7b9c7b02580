#pragma once

// Steering-pair construction: self-induced generation, parallel rephrasing,
// likelihood filtration and cue-prompt integration.

#include "headsteer/model.hpp"
#include "headsteer/sampling.hpp"
#include "headsteer/scoring.hpp"
#include "headsteer/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace headsteer {

struct Sample {
    std::string prompt;
    std::string completion;
    std::string full_text;
    AttributeScore score;
    /// Mean per-token log-probability under the base model.
    double log_likelihood = 0.0;
};

struct SteeringPair {
    std::string pair_id;
    Sample toxic;
    Sample nontoxic;
};

struct PairCorpus {
    std::vector<SteeringPair> pairs;
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
    std::vector<std::string> filters_applied;

    /// Throws on duplicate ids, empty samples, or inverted scores.
    void validate() const;
};

std::vector<std::string> generate_unconditional(const Model& model, const Tokenizer& tokenizer,
                                                std::size_t count, SamplingConfig sampling,
                                                std::uint64_t seed, unsigned jobs = 1);

struct ScoredText {
    std::string text;
    double score = 0.0;
};

/// Highest `k` scores, ties broken by earlier index.
std::vector<ScoredText> select_top_toxic(const std::vector<ScoredText>& scored, std::size_t k);

struct ParallelCandidate {
    std::size_t source_index = 0;
    ScoredText toxic;
    std::string nontoxic;
    /// Both sides identical (nothing was rephrased).
    bool degenerate = false;
};

struct RephraseFailure {
    std::size_t source_index = 0;
    std::string error;
};

struct ParallelResult {
    std::vector<ParallelCandidate> candidates;
    std::vector<RephraseFailure> failures;
};

ParallelResult build_parallel(const std::vector<ScoredText>& toxic, Rephraser& rephraser);

/// Mean per-token log-probability of `text` after BOS.
double mean_log_likelihood(const Model& model, const Tokenizer& tokenizer, const std::string& text);

/// |ll_a - ll_b| <= epsilon; an infinite epsilon keeps everything.
bool within_likelihood_band(double ll_a, double ll_b, double epsilon);

struct FilterLog {
    std::size_t retained = 0;
    std::size_t dropped_band = 0;
    std::size_t dropped_degenerate = 0;
    std::size_t dropped_unscored = 0;
};

/// Scores the non-toxic side, then keeps pairs whose mean per-token
/// log-likelihoods differ by at most `epsilon`. Degenerate pairs (identical
/// sides or non-toxic scoring above toxic) are dropped.
PairCorpus filter_by_likelihood(const std::vector<ParallelCandidate>& candidates, const Model& model,
                                const Tokenizer& tokenizer, Scorer& scorer, double epsilon,
                                FilterLog* log = nullptr);

PairCorpus integrate_prompts(PairCorpus corpus, const std::string& toxic_cue, const std::string& nontoxic_cue);

/// Uniform m-subset, returned in corpus order.
PairCorpus sample_pairs(const PairCorpus& corpus, std::size_t m, std::uint64_t seed);

void write_corpus(const std::filesystem::path& path, const PairCorpus& corpus);
std::string corpus_to_string(const PairCorpus& corpus);
PairCorpus read_corpus(const std::filesystem::path& path);
PairCorpus corpus_from_string(const std::string& text);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace headsteer
