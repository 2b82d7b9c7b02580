#include <doctest.h>

#include "headsteer/vectors.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

using namespace headsteer;

namespace {

Model tiny_model(std::uint32_t layers = 1, std::uint32_t heads = 2, std::uint32_t seq = 64) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = 4 * heads;
    c.d_head = 4;
    c.vocab_size = 257;
    c.max_seq_len = seq;
    return Model::random(c, 16, 77, 0.3f);
}

PairCorpus corpus_of(std::vector<std::pair<std::string, std::string>> texts) {
    PairCorpus c;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        SteeringPair p;
        p.pair_id = "pair-" + std::to_string(10000 + i);
        p.toxic.completion = p.toxic.full_text = texts[i].first;
        p.nontoxic.completion = p.nontoxic.full_text = texts[i].second;
        c.pairs.push_back(p);
    }
    return c;
}

SiteActivation act(ActivationSite s, std::vector<float> v, Label l, std::string id) {
    return SiteActivation{s, std::move(v), l, std::move(id)};
}

std::vector<LabeledVector> gaussian_clusters(std::uint64_t seed, std::size_t per_class, std::size_t dim, double center) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<LabeledVector> out;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        const bool pos = i % 2 == 0;
        LabeledVector v;
        v.positive = pos;
        v.group = std::to_string(i);
        for (std::size_t e = 0; e < dim; ++e) v.features.push_back(static_cast<float>((pos ? center : -center) + nd(rng)));
        out.push_back(v);
    }
    return out;
}

}  // namespace

TEST_CASE("capture counts one activation per site, label and pair") {
    const auto m = tiny_model();
    const auto tok = Tokenizer::byte_level();
    const auto res = capture_pair_activations(m, tok, corpus_of({{"you fool", "you pal"}}));
    CHECK(res.activations.size() == 4);
    for (const auto& a : res.activations) CHECK(a.vector.size() == 4);
}

TEST_CASE("identical sides capture identical vectors") {
    const auto m = tiny_model(2, 2);
    const auto tok = Tokenizer::byte_level();
    const auto res = capture_pair_activations(m, tok, corpus_of({{"same text", "same text"}}));
    std::map<ActivationSite, std::vector<std::vector<float>>> by_site;
    for (const auto& a : res.activations) by_site[a.site].push_back(a.vector);
    for (const auto& [site, vs] : by_site) {
        REQUIRE(vs.size() == 2);
        CHECK(vs[0] == vs[1]);
    }
}

TEST_CASE("capture pooling and truncation") {
    const auto m = tiny_model(1, 2, 8);
    const auto tok = Tokenizer::byte_level();
    const auto res = capture_pair_activations(m, tok, corpus_of({{"abcdefghijkl", "ab"}}));
    REQUIRE(res.truncated.size() == 1);
    CHECK(res.truncated[0] == "pair-10000");

    // last-token pooling equals the final row of a direct forward pass
    const auto ok = capture_pair_activations(m, tok, corpus_of({{"abc", "xyz"}}));
    std::vector<std::int32_t> ids{tok.bos_id()};
    for (auto t : tok.encode("abc")) ids.push_back(t);
    ForwardOptions opt;
    opt.capture = tap_sites(m.config);
    const auto out = forward(m, ids, opt);
    for (const auto& a : ok.activations) {
        if (a.label != Label::toxic) continue;
        const auto& mat = out.captured.at(a.site);
        for (std::size_t e = 0; e < 4; ++e) CHECK(a.vector[e] == mat.at(mat.rows - 1, e));
    }

    // mean pooling over the completion positions
    CaptureOptions mean_opt;
    mean_opt.pooling = Pooling::mean_completion;
    const auto pooled = capture_pair_activations(m, tok, corpus_of({{"abc", "xyz"}}), mean_opt);
    for (const auto& a : pooled.activations) {
        if (a.label != Label::toxic) continue;
        const auto& mat = out.captured.at(a.site);
        for (std::size_t e = 0; e < 4; ++e) {
            double s = 0.0;
            for (std::size_t r = 1; r < mat.rows; ++r) s += mat.at(r, e);
            CHECK(a.vector[e] == doctest::Approx(s / 3).epsilon(1e-6));
        }
    }
}

TEST_CASE("detox vectors") {
    const std::vector<ActivationSite> sites{{0, 0}};
    SUBCASE("direct average") {
        std::vector<SiteActivation> acts{
            act({0, 0}, {0, 0}, Label::toxic, "a"), act({0, 0}, {1, 2}, Label::nontoxic, "a"),
            act({0, 0}, {1, 2}, Label::toxic, "b"), act({0, 0}, {3, 4}, Label::nontoxic, "b"),
        };
        const auto z = compute_detox_vectors(acts, sites, 2);
        CHECK(z.vectors[0] == std::vector<float>{1.5f, 2.0f});
        CHECK(z.m_used == 2);
    }
    SUBCASE("cancellation") {
        std::vector<SiteActivation> acts{act({0, 0}, {0.3f, -1}, Label::toxic, "a"),
                                         act({0, 0}, {0.3f, -1}, Label::nontoxic, "a")};
        CHECK(compute_detox_vectors(acts, sites, 2).vectors[0] == std::vector<float>{0, 0});
    }
    SUBCASE("missing label names pair and site") {
        std::vector<SiteActivation> acts{act({0, 0}, {1, 1}, Label::toxic, "pair-7")};
        CHECK_THROWS_WITH(compute_detox_vectors(acts, sites, 2), doctest::Contains("pair-7"));
        CHECK_THROWS_WITH(compute_detox_vectors(acts, sites, 2), doctest::Contains("(0,0)"));
    }
    SUBCASE("input order does not matter") {
        std::vector<SiteActivation> acts;
        std::mt19937 rng(1);
        std::normal_distribution<float> nd;
        for (int p = 0; p < 6; ++p)
            for (auto l : {Label::toxic, Label::nontoxic}) acts.push_back(act({0, 0}, {nd(rng), nd(rng)}, l, "p" + std::to_string(p)));
        const auto a = compute_detox_vectors(acts, sites, 2);
        std::shuffle(acts.begin(), acts.end(), rng);
        CHECK(compute_detox_vectors(acts, sites, 2).vectors == a.vectors);
    }
}

TEST_CASE("probe on separable clusters") {
    const auto data = gaussian_clusters(3, 100, 4, 3.0);
    const auto p = train_probe(data, 0);
    CHECK(p.accuracy >= 0.95);
    CHECK(p.n_train + p.n_val == 200);
    CHECK(p.n_train == 160);
    // folded weights classify raw inputs
    std::size_t correct = 0;
    for (const auto& d : data) correct += (p.predict(d.features) > 0.5) == d.positive;
    CHECK(correct >= 190);
}

TEST_CASE("probe errors") {
    std::vector<LabeledVector> one_class{{{1.0f}, true, "a"}, {{2.0f}, true, "b"}, {{3.0f}, true, "c"}};
    CHECK_THROWS_WITH(train_probe(one_class, 0), doctest::Contains("single-class"));
    std::vector<LabeledVector> thin{{{1.0f}, true, "a"}, {{2.0f}, false, "b"}, {{3.0f}, false, "c"}};
    CHECK_THROWS(train_probe(thin, 0));
}

TEST_CASE("probe training is deterministic per seed") {
    const auto data = gaussian_clusters(5, 20, 3, 0.5);
    const auto a = train_probe(data, 11);
    const auto b = train_probe(data, 11);
    CHECK(a.weights == b.weights);
    CHECK(a.accuracy == b.accuracy);
}

TEST_CASE("duplicated dataset gives the same probe") {
    const auto data = gaussian_clusters(8, 30, 3, 1.0);
    auto doubled = data;
    doubled.insert(doubled.end(), data.begin(), data.end());
    const auto a = train_probe(data, 4);
    const auto b = train_probe(doubled, 4);
    CHECK(a.accuracy == b.accuracy);
    for (std::size_t e = 0; e < a.weights.size(); ++e) CHECK(a.weights[e] == doctest::Approx(b.weights[e]).epsilon(1e-6));
    CHECK(a.bias == doctest::Approx(b.bias).epsilon(1e-6));
}

TEST_CASE("fusion weights by policy") {
    ProbeSet ps;
    ps.n_layers = 2;
    ps.n_heads = 2;
    ps.d_head = 1;
    for (double acc : {0.9, 0.5, 0.7, 0.6}) ps.probes.push_back(Probe{{0.0f}, 0.0f, acc, 8, 2});
    CHECK(build_fusion_weights(ps, HeadPolicy::all) == std::vector<double>{0.9, 0.5, 0.7, 0.6});
    CHECK(build_fusion_weights(ps, HeadPolicy::uniform) == std::vector<double>{1, 1, 1, 1});
    CHECK(build_fusion_weights(ps, HeadPolicy::top_half) == std::vector<double>{0.9, 0, 0.7, 0});
    CHECK(build_fusion_weights(ps, HeadPolicy::bottom_half) == std::vector<double>{0, 0.5, 0, 0.6});

    // ties resolved by site order
    for (auto& p : ps.probes) p.accuracy = 0.5;
    CHECK(build_fusion_weights(ps, HeadPolicy::top_half) == std::vector<double>{0.5, 0.5, 0, 0});

    CHECK(head_policy_from_string("top-half") == HeadPolicy::top_half);
    CHECK(std::string(to_string(HeadPolicy::bottom_half)) == "bottom-half");
    CHECK_THROWS(head_policy_from_string("middle"));
}

TEST_CASE("heatmap data") {
    ProbeSet ps;
    ps.n_layers = 1;
    ps.n_heads = 2;
    ps.d_head = 1;
    ps.probes = {Probe{{0.0f}, 0.0f, 0.6, 1, 1}, Probe{{0.0f}, 0.0f, 0.8, 1, 1}};
    CHECK(heatmap_data(ps) == std::vector<std::vector<double>>{{0.6, 0.8}});
    const auto path = std::filesystem::temp_directory_path() / "headsteer_heatmap.csv";
    write_heatmap_csv(path, ps);
    std::ifstream in(path);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "layer,head,accuracy");
    CHECK(row == "0,0,0.6");
}

namespace {

// power iteration oracle for the leading eigenpair of the covariance
std::pair<double, std::vector<double>> leading_component(const std::vector<std::vector<float>>& x) {
    const std::size_t n = x.size(), d = x[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& r : x)
        for (std::size_t e = 0; e < d; ++e) mean[e] += r[e] / static_cast<double>(n);
    std::vector<double> v(d, 1.0);
    double lambda = 0.0;
    for (int it = 0; it < 2000; ++it) {
        std::vector<double> w(d, 0.0);
        for (const auto& r : x) {
            double dot = 0.0;
            for (std::size_t e = 0; e < d; ++e) dot += (r[e] - mean[e]) * v[e];
            for (std::size_t e = 0; e < d; ++e) w[e] += dot * (r[e] - mean[e]) / static_cast<double>(n - 1);
        }
        double norm = 0.0;
        for (double a : w) norm += a * a;
        norm = std::sqrt(norm);
        lambda = norm;
        for (std::size_t e = 0; e < d; ++e) v[e] = w[e] / norm;
    }
    return {lambda, v};
}

}  // namespace

TEST_CASE("pca") {
    SUBCASE("rank-1 data") {
        std::vector<std::vector<float>> line;
        for (int i = 0; i < 10; ++i) line.push_back({1.0f * i, 2.0f * i, -1.0f * i});
        const auto r = pca_project(line, 2);
        CHECK(r.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-6).scale(r.explained_variance[0]));
        CHECK(r.degenerate);
    }
    SUBCASE("matches power iteration") {
        std::mt19937 rng(12);
        std::normal_distribution<float> nd;
        std::vector<std::vector<float>> x;
        for (int i = 0; i < 50; ++i) {
            const float a = 3 * nd(rng);
            x.push_back({a + 0.3f * nd(rng), 0.5f * a + 0.3f * nd(rng), 0.3f * nd(rng), -a});
        }
        const auto r = pca_project(x, 2);
        const auto [lambda, v] = leading_component(x);
        CHECK(r.explained_variance[0] == doctest::Approx(lambda).epsilon(1e-4));
        double dot = 0.0;
        for (std::size_t e = 0; e < 4; ++e) dot += r.components[0][e] * v[e];
        CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK_FALSE(r.degenerate);
        CHECK(r.coords.size() == 50);
    }
    SUBCASE("too few examples") { CHECK_THROWS(pca_project({{1.0f, 2.0f}}, 2)); }
}

TEST_CASE("vector and probe files") {
    DetoxVectorSet z;
    z.n_layers = 2;
    z.n_heads = 3;
    z.d_head = 5;
    z.m_used = 20;
    z.corpus_hash = 0xfeedbeefcafef00dull;
    std::mt19937 rng(2);
    std::normal_distribution<float> nd;
    for (int i = 0; i < 6; ++i) {
        std::vector<float> v(5);
        for (auto& x : v) x = nd(rng);
        z.vectors.push_back(v);
    }
    const auto path = std::filesystem::temp_directory_path() / "headsteer_vectors.stvz";
    save_vectors(path, z);
    CHECK(std::filesystem::file_size(path) == 32 + 2 * 3 * 5 * 4);
    const auto back = load_vectors(path);
    CHECK(back.vectors == z.vectors);
    CHECK(back.corpus_hash == z.corpus_hash);
    CHECK(back.at({1, 2}) == z.vectors[5]);

    ProbeSet ps;
    ps.n_layers = 1;
    ps.n_heads = 2;
    ps.d_head = 2;
    ps.m_used = 20;
    ps.probes = {Probe{{0.5f, -1.0f}, 0.25f, 0.75, 16, 4}, Probe{{1.0f, 2.0f}, -0.5f, 1.0, 16, 4}};
    const auto ppath = std::filesystem::temp_directory_path() / "headsteer_probes.stvp";
    save_probes(ppath, ps);
    const auto pback = load_probes(ppath);
    CHECK(pback.probes[1].weights == ps.probes[1].weights);
    CHECK(pback.probes[0].accuracy == 0.75);
    CHECK(pback.probes[0].n_val == 4);

    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 3;
    c.d_model = 15;
    c.d_head = 5;
    CHECK_NOTHROW(check_compatible(c, 2, 3, 5, "vectors"));
    CHECK_THROWS_WITH(check_compatible(c, 2, 4, 5, "vectors"), doctest::Contains("H=4"));
}
