#pragma once

// Minimal GPT-2 style decoder-only transformer (pre-LN, learned positions,
// GELU MLP) with hooks at every attention-head output before W_O.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace headsteer {

class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class NormPlacement : std::uint32_t { pre_ln = 0 };

struct ModelConfig {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t d_model = 0;
    std::uint32_t d_head = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t max_seq_len = 0;
    NormPlacement norm = NormPlacement::pre_ln;

    // throws ModelError on any violated invariant
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct ActivationSite {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;

    auto operator<=>(const ActivationSite&) const = default;
};

std::string to_string(const ActivationSite& site);

/// Additive edit applied to one head output: h <- h + coefficient * vector.
struct HeadEdit {
    std::vector<float> vector;
    float coefficient = 1.0f;
};

using InterventionMap = std::map<ActivationSite, HeadEdit>;

/// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct LayerWeights {
    std::vector<float> ln1_gain, ln1_bias;
    Matrix wq, wk, wv;  // d_model x d_model, y = W x
    std::vector<float> bq, bk, bv;
    Matrix wo;  // d_model x d_model, applied to Concat(h_1..h_H)
    std::vector<float> bo;
    std::vector<float> ln2_gain, ln2_bias;
    Matrix fc;  // d_ff x d_model
    std::vector<float> fc_bias;
    Matrix proj;  // d_model x d_ff
    std::vector<float> proj_bias;
};

struct Model {
    ModelConfig config;
    std::uint32_t d_ff = 0;
    Matrix token_embedding;     // vocab x d_model
    Matrix position_embedding;  // max_seq_len x d_model
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_gain, lnf_bias;
    Matrix unembedding;  // vocab x d_model

    /// Zero-initialised weights (layer-norm gains set to one).
    static Model zeros(const ModelConfig& config, std::uint32_t d_ff);
    /// Gaussian-initialised weights, deterministic in `seed`.
    static Model random(const ModelConfig& config, std::uint32_t d_ff, std::uint64_t seed,
                        float scale = 0.2f);
};

Model load_model(const std::filesystem::path& path);
void save_model(const Model& model, const std::filesystem::path& path);

/// All L x H sites in (layer, head) lexicographic order.
std::vector<ActivationSite> tap_sites(const ModelConfig& config);

/// Per-stream key/value cache for incremental decoding.
class DecoderCache {
  public:
    DecoderCache() = default;
    explicit DecoderCache(const ModelConfig& config);

    std::size_t length() const { return length_; }
    void clear() { length_ = 0; }

  private:
    friend class ForwardPass;
    std::uint32_t n_layers_ = 0;
    std::uint32_t d_model_ = 0;
    std::uint32_t capacity_ = 0;
    std::size_t length_ = 0;
    std::vector<float> keys_;    // [layer][pos][d_model]
    std::vector<float> values_;  // [layer][pos][d_model]
};

struct ForwardOptions {
    const InterventionMap* interventions = nullptr;
    std::vector<ActivationSite> capture;
    DecoderCache* cache = nullptr;
    /// Keep only the final row of logits (decoding only needs the last one).
    bool last_logits_only = false;
    bool capture_residual = false;
};

struct ForwardOutput {
    Matrix logits;  // rows = positions computed in this call (or 1)
    /// site -> positions x d_head, after any intervention
    std::map<ActivationSite, Matrix> captured;
    /// residual[l] is x^l (positions x d_model); residual[0] is the embedding
    std::vector<Matrix> residual;
    /// attention[l-1] is a^l = W_O Concat(h) + b_O
    std::vector<Matrix> attention;
};

ForwardOutput forward(const Model& model, std::span<const std::int32_t> tokens,
                      const ForwardOptions& options = {});

/// Mean per-token log-probability of `tokens[first_scored..]` conditioned on
/// the preceding tokens. Returns the sum and the count through the out struct.
struct LogProbSum {
    double sum = 0.0;
    std::size_t count = 0;
    double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

LogProbSum score_tokens(const Model& model, std::span<const std::int32_t> tokens,
                        std::size_t first_scored);

void log_softmax_inplace(std::span<float> logits);

}  // namespace headsteer
