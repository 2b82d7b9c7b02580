#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace headsteer {

struct SamplingConfig {
    double top_p = 0.9;
    std::uint32_t top_k = 0;  // 0 disables top-k
    /// 0 is the greedy (argmax) limit.
    double temperature = 1.0;
    std::uint32_t max_new_tokens = 20;
    std::uint32_t n_continuations = 25;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Temperature scaling, then top-k, then nucleus truncation, renormalised.
/// The nucleus is the shortest probability-sorted prefix (ties by token id)
/// whose cumulative mass reaches top_p.
std::vector<double> nucleus_filter(std::span<const float> logits, double top_p, std::uint32_t top_k,
                                   double temperature);

/// Counter-based stream: splitmix64 over (seed, stream, counter).
class StreamRng {
  public:
    StreamRng(std::uint64_t seed, std::uint64_t stream);
    std::uint64_t next();
    /// Uniform in [0, 1).
    double uniform();

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Draws an index from `probs` by inverse CDF in index order.
std::int32_t sample_index(std::span<const double> probs, double u);

}  // namespace headsteer
