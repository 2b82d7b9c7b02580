#pragma once

// Per-head detoxification vectors, linear probes, and their diagnostics.

#include "headsteer/model.hpp"
#include "headsteer/pairs.hpp"
#include "headsteer/tokenizer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace headsteer {

enum class Label { toxic, nontoxic };

struct SiteActivation {
    ActivationSite site;
    std::vector<float> vector;
    Label label = Label::toxic;
    std::string pair_id;
};

enum class Pooling {
    last_token,       // head output at the final position of full_text
    mean_completion,  // mean over the completion's positions
};

struct CaptureOptions {
    Pooling pooling = Pooling::last_token;
    /// Run the forward pass over full_text (cue + completion) or the completion only.
    bool include_cue = true;
};

struct CaptureResult {
    std::vector<SiteActivation> activations;
    /// pair ids whose text was left-truncated to fit the context window
    std::vector<std::string> truncated;
};

CaptureResult capture_pair_activations(const Model& model, const Tokenizer& tokenizer,
                                       const PairCorpus& corpus, const CaptureOptions& options = {},
                                       unsigned jobs = 1);

struct DetoxVectorSet {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t d_head = 0;
    std::uint32_t m_used = 0;
    std::uint64_t corpus_hash = 0;
    /// One vector per site in tap_sites order.
    std::vector<std::vector<float>> vectors;

    const std::vector<float>& at(const ActivationSite& site) const;
    std::vector<ActivationSite> sites() const;
};

/// z = mean over pairs of (nontoxic - toxic), accumulated in pair_id order.
DetoxVectorSet compute_detox_vectors(const std::vector<SiteActivation>& activations,
                                     const std::vector<ActivationSite>& sites, std::uint32_t d_head);

struct ProbeTrainConfig {
    double learning_rate = 0.1;
    std::uint32_t epochs = 500;
    double l2 = 1e-3;
    bool standardize = true;
    bool use_bias = true;
    double train_fraction = 0.8;
};

struct LabeledVector {
    std::vector<float> features;
    bool positive = false;  // nontoxic
    /// Examples sharing a group land on the same side of the split.
    std::string group;
};

struct Probe {
    /// Weights and bias in the raw activation space (standardisation folded in).
    std::vector<float> weights;
    float bias = 0.0f;
    double accuracy = 0.0;
    std::uint32_t n_train = 0;
    std::uint32_t n_val = 0;

    double predict(std::span<const float> x) const;  // sigmoid(w.x + b)
};

/// Logistic regression by full-batch gradient descent on a seeded
/// group-level split; accuracy is measured on the held-out groups.
Probe train_probe(const std::vector<LabeledVector>& data, std::uint64_t seed, const ProbeTrainConfig& config = {});

struct ProbeSet {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t d_head = 0;
    std::uint32_t m_used = 0;
    std::uint64_t corpus_hash = 0;
    std::vector<Probe> probes;  // tap_sites order

    const Probe& at(const ActivationSite& site) const;
};

ProbeSet train_probes(const std::vector<SiteActivation>& activations, const ModelConfig& config,
                      std::uint64_t seed, const ProbeTrainConfig& train = {}, unsigned jobs = 1);

enum class HeadPolicy { all, uniform, top_half, bottom_half };

HeadPolicy head_policy_from_string(std::string_view s);
const char* to_string(HeadPolicy p);

/// Coefficient per site in tap_sites order.
std::vector<double> build_fusion_weights(const ProbeSet& probes, HeadPolicy policy);

/// heatmap[l][h] = accuracy at (l, h).
std::vector<std::vector<double>> heatmap_data(const ProbeSet& probes);

struct PcaResult {
    std::vector<std::vector<double>> coords;  // n x k
    std::vector<double> explained_variance;   // per component, descending
    std::vector<std::vector<double>> components;  // k x dim, unit rows
    std::vector<double> mean;
    bool degenerate = false;  // fewer than k non-zero-variance directions
};

PcaResult pca_project(const std::vector<std::vector<float>>& data, std::size_t k = 2);

void save_vectors(const std::filesystem::path& path, const DetoxVectorSet& vectors);
DetoxVectorSet load_vectors(const std::filesystem::path& path);
void save_probes(const std::filesystem::path& path, const ProbeSet& probes);
ProbeSet load_probes(const std::filesystem::path& path);

void write_heatmap_csv(const std::filesystem::path& path, const ProbeSet& probes);
void write_pca_csv(const std::filesystem::path& path, const PcaResult& pca, const std::vector<Label>& labels);

/// Rejects artifacts whose (L, H, D_h) differ from the model's.
void check_compatible(const ModelConfig& config, std::uint32_t n_layers, std::uint32_t n_heads,
                      std::uint32_t d_head, const std::string& what);

}  // namespace headsteer
