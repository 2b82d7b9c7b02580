#include <doctest.h>

#include "headsteer/steer.hpp"

#include <random>

using namespace headsteer;

namespace {

DetoxVectorSet four_site_vectors() {
    DetoxVectorSet z;
    z.n_layers = 2;
    z.n_heads = 2;
    z.d_head = 2;
    z.vectors = {{1, 0}, {0, 1}, {1, 1}, {-1, 2}};
    return z;
}

ProbeSet probes_with(std::vector<double> acc) {
    ProbeSet ps;
    ps.n_layers = 2;
    ps.n_heads = 2;
    ps.d_head = 2;
    for (double a : acc) ps.probes.push_back(Probe{{0.0f, 0.0f}, 0.0f, a, 8, 2});
    return ps;
}

}  // namespace

TEST_CASE("steering defaults") {
    CHECK(kDefaultAlphaContr == 0.38);
    CHECK(kDefaultPairCount == 20);
    CHECK(std::vector<double>(std::begin(kAlphaSweep), std::end(kAlphaSweep)) == std::vector<double>{0.1, 0.3, 0.4, 0.6});
    const FusionConfig f;
    CHECK(f.alpha_contr == 0.38);
    CHECK(f.head_policy == HeadPolicy::all);
}

TEST_CASE("fuse") {
    const std::vector<float> h{1.0f, 0.0f}, z{0.0f, 1.0f};
    const auto out = fuse(h, z, 0.5, 0.38);
    CHECK(out[0] == 1.0f);
    CHECK(out[1] == doctest::Approx(0.19).epsilon(1e-7));

    std::mt19937 rng(4);
    std::normal_distribution<float> nd;
    std::vector<float> hh(16), zz(16);
    for (auto& x : hh) x = nd(rng);
    for (auto& x : zz) x = nd(rng);
    CHECK(fuse(hh, zz, 0.8, 0.0) == hh);
    CHECK_THROWS(fuse(hh, std::vector<float>(3), 1.0, 1.0));
}

TEST_CASE("build_intervention") {
    const auto z = four_site_vectors();
    const auto ps = probes_with({0.9, 0.5, 0.7, 0.6});

    FusionConfig zero;
    zero.alpha_contr = 0.0;
    CHECK(build_intervention(z, build_fusion_weights(ps, HeadPolicy::all), zero).empty());

    FusionConfig uni;
    uni.alpha_contr = 1.0;
    const auto u = build_intervention(z, build_fusion_weights(ps, HeadPolicy::uniform), uni);
    REQUIRE(u.size() == 4);
    for (const auto& [site, edit] : u) CHECK(edit.coefficient == 1.0f);

    FusionConfig top;
    top.head_policy = HeadPolicy::top_half;
    const auto t = build_intervention(z, build_fusion_weights(ps, HeadPolicy::top_half), top);
    CHECK(t.size() == 2);
    CHECK(t.count({0, 0}) == 1);
    CHECK(t.count({1, 0}) == 1);
    CHECK(t.at({0, 0}).coefficient == static_cast<float>(0.9 * 0.38));
    CHECK(t.at({1, 0}).vector == z.vectors[2]);

    FusionConfig restricted;
    restricted.sites = std::vector<ActivationSite>{{1, 1}};
    const auto r = build_intervention(z, build_fusion_weights(ps, HeadPolicy::all), restricted);
    REQUIRE(r.size() == 1);
    CHECK(r.count({1, 1}) == 1);

    CHECK_THROWS(build_intervention(z, {1.0, 1.0}, FusionConfig{}));
    FusionConfig bad;
    bad.alpha_contr = -0.1;
    CHECK_THROWS(build_intervention(z, build_fusion_weights(ps, HeadPolicy::all), bad));
}

TEST_CASE("fusion config json") {
    FusionConfig f;
    f.head_policy = HeadPolicy::bottom_half;
    const auto j = to_json(f);
    CHECK(j.at("alpha_contr") == 0.38);
    CHECK(j.at("head_policy") == "bottom-half");
}

TEST_CASE("intervention applies fuse to the head output at every position") {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 4;
    c.d_head = 2;
    c.vocab_size = 7;
    c.max_seq_len = 8;
    const auto m = Model::random(c, 8, 21);
    const std::vector<std::int32_t> toks{1, 2, 3};
    const auto z = four_site_vectors();
    const auto ps = probes_with({0.9, 0.5, 0.7, 0.6});
    const auto iv = build_intervention(z, build_fusion_weights(ps, HeadPolicy::all), FusionConfig{});

    // layer-0 heads see unmodified inputs, so their captured outputs are the fused base outputs
    ForwardOptions base_opt, steer_opt;
    base_opt.capture = {{0, 0}, {0, 1}};
    steer_opt.capture = base_opt.capture;
    steer_opt.interventions = &iv;
    const auto base = forward(m, toks, base_opt);
    const auto steered = forward(m, toks, steer_opt);
    for (std::uint32_t h = 0; h < 2; ++h) {
        const auto& b = base.captured.at({0, h});
        const auto& s = steered.captured.at({0, h});
        for (std::size_t r = 0; r < 3; ++r) {
            const auto expect = fuse(b.row(r), z.vectors[h], ps.probes[h].accuracy, kDefaultAlphaContr);
            for (std::size_t e = 0; e < 2; ++e) CHECK(s.at(r, e) == expect[e]);
        }
    }
}
