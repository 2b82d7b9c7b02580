#include "headsteer/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace headsteer {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

}  // namespace

void SamplingConfig::validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
    if (!(temperature >= 0.0) || !std::isfinite(temperature))
        throw std::invalid_argument("temperature must be finite and >= 0");
    if (max_new_tokens == 0) throw std::invalid_argument("max_new_tokens must be >= 1");
    if (n_continuations == 0) throw std::invalid_argument("n_continuations must be >= 1");
}

std::vector<double> nucleus_filter(std::span<const float> logits, double top_p, std::uint32_t top_k,
                                   double temperature) {
    const std::size_t n = logits.size();
    std::vector<double> probs(n, 0.0);
    if (n == 0) return probs;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Stable sort keeps ties in token-id order.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });

    if (temperature == 0.0) {
        probs[order[0]] = 1.0;
        return probs;
    }

    const double mx = logits[order[0]];
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        total += probs[i];
    }
    for (auto& p : probs) p /= total;

    std::size_t keep = n;
    if (top_k > 0) keep = std::min<std::size_t>(keep, top_k);
    if (top_p < 1.0) {
        // nucleus mass is measured on the top-k renormalised distribution
        double mass = 0.0;
        for (std::size_t i = 0; i < keep; ++i) mass += probs[order[i]];
        double cum = 0.0;
        for (std::size_t i = 0; i < keep; ++i) {
            cum += probs[order[i]] / mass;
            if (cum >= top_p) {
                keep = i + 1;
                break;
            }
        }
    }
    double kept = 0.0;
    for (std::size_t i = 0; i < keep; ++i) kept += probs[order[i]];
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / kept;
    return out;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(a) ^ (b * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
}

StreamRng::StreamRng(std::uint64_t seed, std::uint64_t stream) : key_(mix_seed(seed, stream)) {}

std::uint64_t StreamRng::next() { return splitmix64(key_ ^ splitmix64(counter_++)); }

double StreamRng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::int32_t sample_index(std::span<const double> probs, double u) {
    double cum = 0.0;
    std::int32_t last_nonzero = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last_nonzero = static_cast<std::int32_t>(i);
        cum += probs[i];
        if (u < cum) return last_nonzero;
    }
    if (last_nonzero < 0) throw std::runtime_error("cannot sample from an all-zero distribution");
    return last_nonzero;
}

}  // namespace headsteer
