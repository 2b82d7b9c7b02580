#include "headsteer/steer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headsteer {

void FusionConfig::validate() const {
    if (!std::isfinite(alpha_contr) || alpha_contr < 0.0) throw std::invalid_argument("alpha_contr must be finite and >= 0");
}

nlohmann::ordered_json to_json(const FusionConfig& f) {
    nlohmann::ordered_json j;
    j["alpha_contr"] = f.alpha_contr;
    j["head_policy"] = to_string(f.head_policy);
    if (f.sites) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& s : *f.sites) arr.push_back({s.layer, s.head});
        j["sites"] = std::move(arr);
    }
    return j;
}

namespace {

// Same float expression the forward hook evaluates, so the two paths agree.
float fusion_coefficient(double alpha_prob, double alpha_contr) {
    return static_cast<float>(alpha_prob * alpha_contr);
}

}  // namespace

std::vector<float> fuse(std::span<const float> h, std::span<const float> z, double alpha_prob, double alpha_contr) {
    if (h.size() != z.size()) throw std::invalid_argument("fuse: h and z lengths differ");
    const float coef = fusion_coefficient(alpha_prob, alpha_contr);
    std::vector<float> out(h.begin(), h.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coef * z[i];
    return out;
}

InterventionMap build_intervention(const DetoxVectorSet& vectors, const std::vector<double>& weights,
                                   const FusionConfig& config) {
    config.validate();
    const auto sites = vectors.sites();
    if (weights.size() != sites.size())
        throw std::invalid_argument("fusion weights cover " + std::to_string(weights.size()) + " sites but vectors cover " +
                                    std::to_string(sites.size()));
    InterventionMap map;
    if (config.alpha_contr == 0.0) return map;
    for (std::size_t i = 0; i < sites.size(); ++i) {
        if (config.sites && std::find(config.sites->begin(), config.sites->end(), sites[i]) == config.sites->end())
            continue;
        const float coef = fusion_coefficient(weights[i], config.alpha_contr);
        if (coef == 0.0f) continue;
        map.emplace(sites[i], HeadEdit{vectors.vectors[i], coef});
    }
    return map;
}

}  // namespace headsteer
