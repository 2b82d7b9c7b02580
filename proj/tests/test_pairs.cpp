#include <doctest.h>

#include "headsteer/pairs.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

using namespace headsteer;

namespace {

Model byte_model(std::uint64_t seed = 1) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.vocab_size = 257;
    c.max_seq_len = 64;
    return Model::random(c, 16, seed, 0.3f);
}

Lexicon test_lexicon() { return Lexicon(std::set<std::string>{"idiot", "stupid", "fool"}); }

// Fails every call for the listed texts.
class FlakyRephraser final : public Rephraser {
  public:
    explicit FlakyRephraser(std::set<std::string> failing) : failing_(std::move(failing)) {}
    std::string rephrase(const std::string& text) override {
        if (failing_.count(text)) throw RemoteClientError("HTTP 503 after 3 attempts");
        return "kind " + text;
    }

  private:
    std::set<std::string> failing_;
};

PairCorpus make_corpus(std::size_t n) {
    PairCorpus c;
    for (std::size_t i = 0; i < n; ++i) {
        SteeringPair p;
        char id[32];
        std::snprintf(id, sizeof id, "pair-%05zu", i);
        p.pair_id = id;
        p.toxic.completion = p.toxic.full_text = "you idiot " + std::to_string(i);
        p.toxic.score = {0.5, ScoreSource::local_lexicon};
        p.nontoxic.completion = p.nontoxic.full_text = "you friend " + std::to_string(i);
        p.nontoxic.score = {0.0, ScoreSource::local_lexicon};
        c.pairs.push_back(p);
    }
    c.provenance = {{"note", "synthetic"}};
    return c;
}

}  // namespace

TEST_CASE("generate_unconditional") {
    const auto m = byte_model();
    const auto tok = Tokenizer::byte_level();
    SamplingConfig s;
    s.max_new_tokens = 10;
    CHECK_THROWS_WITH(generate_unconditional(m, tok, 0, s, 1), "count must be >= 1");
    const auto a = generate_unconditional(m, tok, 5, s, 42);
    const auto b = generate_unconditional(m, tok, 5, s, 42);
    CHECK(a.size() == 5);
    CHECK(a == b);
}

TEST_CASE("select_top_toxic") {
    std::vector<ScoredText> s{{"a", 0.1}, {"b", 0.9}, {"c", 0.5}};
    auto top = select_top_toxic(s, 2);
    REQUIRE(top.size() == 2);
    CHECK(top[0].text == "b");
    CHECK(top[1].text == "c");
    CHECK_THROWS(select_top_toxic(s, 4));

    std::vector<ScoredText> eq{{"0", 0.3}, {"1", 0.3}, {"2", 0.3}, {"3", 0.3}};
    top = select_top_toxic(eq, 3);
    CHECK(top[0].text == "0");
    CHECK(top[1].text == "1");
    CHECK(top[2].text == "2");

    // full-sort oracle
    std::mt19937 rng(9);
    std::uniform_int_distribution<int> d(0, 20);
    std::vector<ScoredText> many;
    for (int i = 0; i < 100; ++i) many.push_back({std::to_string(i), d(rng) / 20.0});
    std::vector<std::pair<double, int>> keyed;
    for (int i = 0; i < 100; ++i) keyed.push_back({-many[i].score, i});
    std::sort(keyed.begin(), keyed.end());
    top = select_top_toxic(many, 10);
    for (int i = 0; i < 10; ++i) CHECK(top[i].text == std::to_string(keyed[i].second));
}

TEST_CASE("build_parallel") {
    const auto lex = test_lexicon();
    SUBCASE("empty input") {
        LocalRephraser r(lex, {}, "[neutral]");
        const auto out = build_parallel({}, r);
        CHECK(out.candidates.empty());
        CHECK(out.failures.empty());
    }
    SUBCASE("lexicon-free text gives a degenerate pair") {
        LocalRephraser r(lex, {}, "[neutral]");
        const auto out = build_parallel({{"hello there", 0.0}}, r);
        REQUIRE(out.candidates.size() == 1);
        CHECK(out.candidates[0].nontoxic == "hello there");
        CHECK(out.candidates[0].degenerate);
    }
    SUBCASE("one failure among five") {
        FlakyRephraser r({"t2"});
        std::vector<ScoredText> in{{"t0", 1}, {"t1", 1}, {"t2", 1}, {"t3", 1}, {"t4", 1}};
        const auto out = build_parallel(in, r);
        CHECK(out.candidates.size() == 4);
        REQUIRE(out.failures.size() == 1);
        CHECK(out.failures[0].source_index == 2);
        CHECK(out.failures[0].error.find("503") != std::string::npos);
    }
    SUBCASE("all failing") {
        FlakyRephraser r({"t0", "t1"});
        CHECK_THROWS_WITH(build_parallel({{"t0", 1}, {"t1", 1}}, r), "no candidates produced");
    }
}

TEST_CASE("likelihood band") {
    CHECK(within_likelihood_band(-2.0, -2.1, 0.5));
    CHECK_FALSE(within_likelihood_band(-2.0, -5.0, 0.5));
    CHECK(within_likelihood_band(-2.0, -500.0, std::numeric_limits<double>::infinity()));
}

TEST_CASE("filter_by_likelihood") {
    const auto m = byte_model(5);
    const auto tok = Tokenizer::byte_level();
    LexiconScorer scorer(test_lexicon());
    std::vector<ParallelCandidate> cands{
        {0, {"you idiot", 0.5}, "you friend", false},
        {1, {"stupid fool", 1.0}, "stupid fool", true},
        {2, {"a fool", 0.5}, "a stupid idiot", false},  // rephrase scores higher: degenerate
        {3, {"the fool left", 1.0 / 3}, "the guest left", false},
    };
    FilterLog log;
    const auto all = filter_by_likelihood(cands, m, tok, scorer, std::numeric_limits<double>::infinity(), &log);
    CHECK(log.retained == 2);
    CHECK(log.dropped_degenerate == 2);
    REQUIRE(all.pairs.size() == 2);
    CHECK(all.pairs[0].pair_id == "pair-00000");
    CHECK(all.pairs[1].pair_id == "pair-00003");
    CHECK(all.pairs[0].nontoxic.score.value == 0.0);
    CHECK(all.pairs[0].toxic.log_likelihood == doctest::Approx(mean_log_likelihood(m, tok, "you idiot")));
    CHECK_NOTHROW(all.validate());

    // a band narrower than every gap drops everything that survived the degeneracy check
    double min_gap = 1e9;
    for (const auto& p : all.pairs) min_gap = std::min(min_gap, std::abs(p.toxic.log_likelihood - p.nontoxic.log_likelihood));
    const auto none = filter_by_likelihood(cands, m, tok, scorer, min_gap / 2, &log);
    CHECK(none.pairs.empty());
    CHECK(log.dropped_band == 2);
    CHECK_THROWS(filter_by_likelihood(cands, m, tok, scorer, 0.0));
}

TEST_CASE("integrate_prompts") {
    const auto c = make_corpus(3);
    const auto same = integrate_prompts(c, "", "");
    CHECK(corpus_to_string(same) == corpus_to_string(c));
    const auto cued = integrate_prompts(c, "The following is toxic: ", "The following is nice: ");
    for (const auto& p : cued.pairs) {
        CHECK(p.toxic.full_text.rfind("The following is toxic: ", 0) == 0);
        CHECK(p.nontoxic.full_text.rfind("The following is nice: ", 0) == 0);
        CHECK(p.toxic.full_text.substr(24) == p.toxic.completion);
    }
}

TEST_CASE("sample_pairs") {
    const auto c = make_corpus(500);
    CHECK(sample_pairs(c, 500, 1).pairs.size() == 500);
    CHECK_THROWS(sample_pairs(c, 501, 1));
    const auto a = sample_pairs(c, 20, 7);
    const auto b = sample_pairs(c, 20, 7);
    CHECK(corpus_to_string(a) == corpus_to_string(b));
    std::set<std::string> ids;
    for (const auto& p : a.pairs) ids.insert(p.pair_id);
    CHECK(ids.size() == 20);
    CHECK(std::is_sorted(a.pairs.begin(), a.pairs.end(),
                         [](const auto& x, const auto& y) { return x.pair_id < y.pair_id; }));
    CHECK(corpus_to_string(sample_pairs(c, 20, 8)) != corpus_to_string(a));

    // every pair is reachable
    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 400; ++s)
        for (const auto& p : sample_pairs(make_corpus(10), 3, s).pairs) seen.insert(p.pair_id);
    CHECK(seen.size() == 10);
}

TEST_CASE("corpus serialisation round-trips byte-identically") {
    auto c = make_corpus(4);
    c.filters_applied = {"likelihood-band epsilon=0.7"};
    const auto text = corpus_to_string(c);
    CHECK(text.rfind("# ", 0) == 0);
    const auto back = corpus_from_string(text);
    CHECK(back.pairs.size() == 4);
    CHECK(back.filters_applied == c.filters_applied);
    CHECK(corpus_to_string(back) == text);

    const auto path = std::filesystem::temp_directory_path() / "headsteer_corpus.jsonl";
    write_corpus(path, c);
    CHECK(corpus_to_string(read_corpus(path)) == text);
}

TEST_CASE("corpus validation") {
    auto c = make_corpus(2);
    CHECK_NOTHROW(c.validate());
    c.pairs[1].pair_id = c.pairs[0].pair_id;
    CHECK_THROWS(c.validate());
    c = make_corpus(2);
    c.pairs[0].nontoxic.score.value = 0.9;
    CHECK_THROWS(c.validate());
}

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}
