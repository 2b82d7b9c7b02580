#include <doctest.h>

#include "headsteer/model.hpp"
#include "headsteer/tokenizer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace headsteer;

namespace {

ModelConfig toy_config(std::uint32_t layers = 2, std::uint32_t heads = 2, std::uint32_t d_model = 8) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_head = d_model / heads;
    c.vocab_size = 11;
    c.max_seq_len = 16;
    return c;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("headsteer_test_" + name);
}

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }


}  // namespace

TEST_CASE("config validation") {
    auto c = toy_config(1, 2, 8);
    CHECK_NOTHROW(c.validate());
    c.d_model = 10;
    c.n_heads = 3;
    c.d_head = 3;
    CHECK_THROWS_WITH(c.validate(), "d_model not divisible by n_heads");
}

TEST_CASE("load a minimal 1-layer 2-head model") {
    const auto path = temp_file("minimal.stvw");
    save_model(Model::random(toy_config(1, 2, 8), 16, 1), path);
    const auto m = load_model(path);
    CHECK(m.config.n_layers == 1);
    CHECK(m.config.n_heads == 2);
    CHECK(m.config.d_head == 4);
    CHECK(m.d_ff == 16);
}

TEST_CASE("save/load round trip is bitwise exact") {
    const auto path = temp_file("roundtrip.stvw");
    const auto m = Model::random(toy_config(), 12, 99);
    save_model(m, path);
    const auto back = load_model(path);
    CHECK(back.token_embedding.data == m.token_embedding.data);
    CHECK(back.unembedding.data == m.unembedding.data);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        CHECK(back.layers[l].wq.data == m.layers[l].wq.data);
        CHECK(back.layers[l].wo.data == m.layers[l].wo.data);
        CHECK(back.layers[l].proj.data == m.layers[l].proj.data);
        CHECK(back.layers[l].ln2_gain == m.layers[l].ln2_gain);
    }
}

TEST_CASE("malformed weight files are rejected with the cause named") {
    const auto path = temp_file("bad.stvw");
    SUBCASE("header with d_model=10, H=3") {
        std::ofstream out(path, std::ios::binary);
        out.write("STVW", 4);
        put_u32(out, 1);
        for (std::uint32_t v : {1u, 3u, 10u, 3u, 11u, 16u, 0u}) put_u32(out, v);
        out.close();
        CHECK_THROWS_WITH(load_model(path), "d_model not divisible by n_heads");
    }
    SUBCASE("bad magic") {
        std::ofstream out(path, std::ios::binary);
        out.write("NOPE", 4);
        out.close();
        CHECK_THROWS_AS(load_model(path), ModelError);
    }
    SUBCASE("non-finite weight names the tensor") {
        auto m = Model::random(toy_config(1, 2, 8), 8, 3);
        m.layers[0].wv.data[5] = std::nanf("");
        save_model(m, path);
        CHECK_THROWS_WITH(load_model(path), "non-finite weight in tensor 'h.0.attn.v.w'");
    }
    SUBCASE("dimension mismatch names the tensor") {
        save_model(Model::random(toy_config(1, 2, 8), 8, 3), path);
        // bump vocab_size in the header so the embedding shape no longer fits
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4 + 4 + 4 * 4);
        put_u32(f, 12);
        f.close();
        CHECK_THROWS_WITH(load_model(path), doctest::Contains("'wte'"));
    }
}

TEST_CASE("tap_sites enumerates in (layer, head) order") {
    auto s = tap_sites(toy_config(1, 2, 8));
    REQUIRE(s.size() == 2);
    CHECK(s[0] == ActivationSite{0, 0});
    CHECK(s[1] == ActivationSite{0, 1});
    s = tap_sites(toy_config(2, 2, 8));
    CHECK(s == std::vector<ActivationSite>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    ModelConfig large;
    large.n_layers = 36;
    large.n_heads = 20;
    large.d_model = 1280;
    large.d_head = 64;
    large.vocab_size = 1;
    large.max_seq_len = 1;
    CHECK(tap_sites(large).size() == 720);
}

TEST_CASE("forward rejects out-of-range tokens and over-long sequences") {
    const auto m = Model::random(toy_config(), 8, 5);
    const std::vector<std::int32_t> bad{1, 11};
    CHECK_THROWS_AS(forward(m, bad), ModelError);
    std::vector<std::int32_t> longseq(17, 1);
    CHECK_THROWS_AS(forward(m, longseq), ModelError);
}

TEST_CASE("zero-vector interventions leave logits bitwise unchanged") {
    const auto m = Model::random(toy_config(), 8, 7);
    const std::vector<std::int32_t> toks{3, 1, 4, 1, 5};
    InterventionMap iv;
    for (const auto& s : tap_sites(m.config)) iv[s] = HeadEdit{std::vector<float>(m.config.d_head, 0.0f), 0.7f};
    ForwardOptions opt;
    opt.interventions = &iv;
    CHECK(forward(m, toks, opt).logits.data == forward(m, toks).logits.data);
}

TEST_CASE("all-zero weights give constant logits across the vocabulary") {
    auto m = Model::zeros(toy_config(), 8);
    const std::vector<std::int32_t> toks{0, 2, 9};
    const auto out = forward(m, toks);
    for (std::size_t r = 0; r < out.logits.rows; ++r)
        for (std::size_t c = 1; c < out.logits.cols; ++c) CHECK(out.logits.at(r, c) == out.logits.at(r, 0));
}

TEST_CASE("intervention additivity: (v, c) equals (c*v, 1) exactly") {
    const auto m = Model::random(toy_config(), 8, 11);
    const std::vector<std::int32_t> toks{2, 7, 1};
    std::mt19937 rng(3);
    std::normal_distribution<float> nd;
    InterventionMap a, b;
    for (const auto& s : tap_sites(m.config)) {
        std::vector<float> v(m.config.d_head);
        for (auto& x : v) x = nd(rng);
        const float c = 0.37f;
        std::vector<float> cv(v);
        for (auto& x : cv) x *= c;
        a[s] = HeadEdit{v, c};
        b[s] = HeadEdit{cv, 1.0f};
    }
    ForwardOptions oa, ob;
    oa.interventions = &a;
    ob.interventions = &b;
    CHECK(forward(m, toks, oa).logits.data == forward(m, toks, ob).logits.data);
}

TEST_CASE("cached incremental decoding matches full recomputation") {
    // fixed-seed 2-layer toy model, tokens [3,1,4]
    const auto m = Model::random(toy_config(), 16, 2024);
    const std::vector<std::int32_t> toks{3, 1, 4};

    InterventionMap iv;
    iv[{1, 0}] = HeadEdit{std::vector<float>{0.5f, -0.25f, 1.0f, 0.1f}, 0.9f};

    const std::vector<const InterventionMap*> maps{nullptr, &iv};
    for (const InterventionMap* map : maps) {
        ForwardOptions full_opt;
        full_opt.interventions = map;
        const auto full = forward(m, toks, full_opt);

        DecoderCache cache(m.config);
        ForwardOptions inc;
        inc.cache = &cache;
        inc.interventions = map;
        for (std::size_t i = 0; i < toks.size(); ++i) {
            const std::int32_t t[1] = {toks[i]};
            const auto step = forward(m, t, inc);
            REQUIRE(step.logits.rows == 1);
            for (std::size_t c = 0; c < step.logits.cols; ++c)
                CHECK(std::abs(step.logits.at(0, c) - full.logits.at(i, c)) <= 1e-5);
        }
        CHECK(cache.length() == 3);
    }
}

TEST_CASE("captured head outputs times W_O reproduce the attention output") {
    const auto m = Model::random(toy_config(), 8, 31);
    const std::vector<std::int32_t> toks{1, 2, 3, 4};
    ForwardOptions opt;
    opt.capture = tap_sites(m.config);
    opt.capture_residual = true;
    const auto out = forward(m, toks, opt);
    REQUIRE(out.attention.size() == 2);
    REQUIRE(out.residual.size() == 3);
    const auto d = m.config.d_model, dh = m.config.d_head;
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (std::size_t pos = 0; pos < toks.size(); ++pos) {
            std::vector<double> concat(d);
            for (std::uint32_t h = 0; h < m.config.n_heads; ++h)
                for (std::size_t e = 0; e < dh; ++e) concat[h * dh + e] = out.captured.at({l, h}).at(pos, e);
            for (std::size_t r = 0; r < d; ++r) {
                double a = m.layers[l].bo[r];
                for (std::size_t c = 0; c < d; ++c) a += m.layers[l].wo.at(r, c) * concat[c];
                CHECK(std::abs(a - out.attention[l].at(pos, r)) <= 1e-5);
            }
        }
    }
}

TEST_CASE("forward is deterministic") {
    const auto m = Model::random(toy_config(), 8, 8);
    const std::vector<std::int32_t> toks{5, 4, 3, 2};
    CHECK(forward(m, toks).logits.data == forward(m, toks).logits.data);
}

TEST_CASE("score_tokens sums per-token log-probabilities") {
    const auto m = Model::random(toy_config(), 8, 12);
    const std::vector<std::int32_t> toks{1, 6, 2, 9};
    const auto full = forward(m, toks);
    double expect = 0.0;
    for (std::size_t i = 1; i < toks.size(); ++i) {
        auto row = full.logits.row(i - 1);
        double mx = -1e30, z = 0.0;
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        for (float v : row) z += std::exp(v - mx);
        expect += row[static_cast<std::size_t>(toks[i])] - mx - std::log(z);
    }
    const auto got = score_tokens(m, toks, 1);
    CHECK(got.count == 3);
    CHECK(got.sum == doctest::Approx(expect).epsilon(1e-6));
}
