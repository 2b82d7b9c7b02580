#pragma once

// Head-wise activation fusion: h <- h + alpha_prob * alpha_contr * z.

#include "headsteer/model.hpp"
#include "headsteer/vectors.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <vector>

namespace headsteer {

inline constexpr double kDefaultAlphaContr = 0.38;
inline constexpr std::uint32_t kDefaultPairCount = 20;
inline constexpr double kAlphaSweep[] = {0.1, 0.3, 0.4, 0.6};

struct FusionConfig {
    double alpha_contr = kDefaultAlphaContr;
    HeadPolicy head_policy = HeadPolicy::all;
    /// Restrict fusion to these sites when set.
    std::optional<std::vector<ActivationSite>> sites;

    void validate() const;
};

nlohmann::ordered_json to_json(const FusionConfig& f);

std::vector<float> fuse(std::span<const float> h, std::span<const float> z, double alpha_prob, double alpha_contr);

/// Entry per site with coefficient weights[site] * alpha_contr; zero
/// coefficients are omitted.
InterventionMap build_intervention(const DetoxVectorSet& vectors, const std::vector<double>& weights,
                                   const FusionConfig& config);

}  // namespace headsteer
