#include "headsteer/pairs.hpp"

#include "headsteer/generation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace headsteer {

void PairCorpus::validate() const {
    std::set<std::string> ids;
    for (const auto& p : pairs) {
        if (!ids.insert(p.pair_id).second) throw std::runtime_error("duplicate pair_id " + p.pair_id);
        if (p.toxic.full_text.empty() || p.nontoxic.full_text.empty())
            throw std::runtime_error("pair " + p.pair_id + " has an empty sample");
        if (p.toxic.score.value < p.nontoxic.score.value)
            throw std::runtime_error("pair " + p.pair_id + " scores non-toxic above toxic");
    }
}

std::vector<std::string> generate_unconditional(const Model& model, const Tokenizer& tokenizer,
                                                std::size_t count, SamplingConfig sampling,
                                                std::uint64_t seed, unsigned jobs) {
    if (count < 1) throw std::invalid_argument("count must be >= 1");
    sampling.n_continuations = static_cast<std::uint32_t>(count);
    sampling.seed = seed;
    const auto record = steered_generate(model, tokenizer, nullptr, "", sampling, jobs);
    std::vector<std::string> texts;
    texts.reserve(count);
    for (const auto& c : record.continuations) texts.push_back(c.text);
    return texts;
}

std::vector<ScoredText> select_top_toxic(const std::vector<ScoredText>& scored, std::size_t k) {
    if (k > scored.size())
        throw std::invalid_argument("k (" + std::to_string(k) + ") exceeds the number of texts (" +
                                    std::to_string(scored.size()) + ")");
    std::vector<std::size_t> order(scored.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scored[a].score > scored[b].score; });
    std::vector<ScoredText> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(scored[order[i]]);
    return out;
}

ParallelResult build_parallel(const std::vector<ScoredText>& toxic, Rephraser& rephraser) {
    ParallelResult result;
    for (std::size_t i = 0; i < toxic.size(); ++i) {
        try {
            auto rephrased = rephraser.rephrase(toxic[i].text);
            const bool degenerate = rephrased == toxic[i].text;
            result.candidates.push_back({i, toxic[i], std::move(rephrased), degenerate});
        } catch (const std::exception& e) {
            result.failures.push_back({i, e.what()});
        }
    }
    if (!toxic.empty() && result.candidates.empty()) throw std::runtime_error("no candidates produced");
    return result;
}

double mean_log_likelihood(const Model& model, const Tokenizer& tokenizer, const std::string& text) {
    std::vector<std::int32_t> ids{tokenizer.bos_id()};
    const auto body = tokenizer.encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    if (ids.size() > model.config.max_seq_len)
        ids.erase(ids.begin() + 1, ids.begin() + 1 + static_cast<std::ptrdiff_t>(ids.size() - model.config.max_seq_len));
    const auto lp = score_tokens(model, ids, 1);
    return lp.mean();
}

namespace {

std::string pair_id_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair-%05zu", index);
    return buf;
}

Sample make_sample(std::string completion, AttributeScore score, double ll) {
    Sample s;
    s.completion = completion;
    s.full_text = std::move(completion);
    s.score = score;
    s.log_likelihood = ll;
    return s;
}

}  // namespace

bool within_likelihood_band(double ll_a, double ll_b, double epsilon) {
    return std::abs(ll_a - ll_b) <= epsilon;
}

PairCorpus filter_by_likelihood(const std::vector<ParallelCandidate>& candidates, const Model& model,
                                const Tokenizer& tokenizer, Scorer& scorer, double epsilon, FilterLog* log) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
    std::vector<std::string> nontoxic_texts;
    nontoxic_texts.reserve(candidates.size());
    for (const auto& c : candidates) nontoxic_texts.push_back(c.nontoxic);
    const auto scores = nontoxic_texts.empty() ? std::vector<ScoredItem>{} : scorer.score(nontoxic_texts);

    FilterLog local;
    PairCorpus corpus;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        if (!scores[i].score) {
            ++local.dropped_unscored;
            continue;
        }
        const AttributeScore toxic_score{c.toxic.score, scores[i].score->source};
        if (c.degenerate || c.nontoxic == c.toxic.text || scores[i].score->value > c.toxic.score ||
            c.nontoxic.empty() || c.toxic.text.empty()) {
            ++local.dropped_degenerate;
            continue;
        }
        const double ll_toxic = mean_log_likelihood(model, tokenizer, c.toxic.text);
        const double ll_nontoxic = mean_log_likelihood(model, tokenizer, c.nontoxic);
        if (!within_likelihood_band(ll_toxic, ll_nontoxic, epsilon)) {
            ++local.dropped_band;
            continue;
        }
        SteeringPair pair;
        pair.pair_id = pair_id_for(c.source_index);
        pair.toxic = make_sample(c.toxic.text, toxic_score, ll_toxic);
        pair.nontoxic = make_sample(c.nontoxic, *scores[i].score, ll_nontoxic);
        corpus.pairs.push_back(std::move(pair));
        ++local.retained;
    }
    std::ostringstream desc;
    desc << "likelihood-band epsilon=" << epsilon;
    corpus.filters_applied.push_back(desc.str());
    corpus.filters_applied.push_back("drop-degenerate");
    if (log != nullptr) *log = local;
    return corpus;
}

PairCorpus integrate_prompts(PairCorpus corpus, const std::string& toxic_cue, const std::string& nontoxic_cue) {
    for (auto& p : corpus.pairs) {
        p.toxic.prompt = toxic_cue;
        p.toxic.full_text = toxic_cue + p.toxic.completion;
        p.nontoxic.prompt = nontoxic_cue;
        p.nontoxic.full_text = nontoxic_cue + p.nontoxic.completion;
    }
    return corpus;
}

PairCorpus sample_pairs(const PairCorpus& corpus, std::size_t m, std::uint64_t seed) {
    if (m > corpus.pairs.size())
        throw std::invalid_argument("m (" + std::to_string(m) + ") exceeds corpus size (" +
                                    std::to_string(corpus.pairs.size()) + ")");
    std::vector<std::size_t> idx(corpus.pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    StreamRng rng(seed, 0x5a3c);
    // partial Fisher-Yates
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t remaining = idx.size() - i;
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(remaining));
        std::swap(idx[i], idx[std::min(j, idx.size() - 1)]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    PairCorpus out;
    out.provenance = corpus.provenance;
    out.filters_applied = corpus.filters_applied;
    out.filters_applied.push_back("sample m=" + std::to_string(m) + " seed=" + std::to_string(seed));
    for (auto i : idx) out.pairs.push_back(corpus.pairs[i]);
    return out;
}

// ---------------------------------------------------------------- JSON Lines

namespace {

nlohmann::ordered_json sample_json(const Sample& s) {
    return {{"prompt", s.prompt},
            {"completion", s.completion},
            {"score", s.score.value},
            {"score_source", to_string(s.score.source)},
            {"loglik", s.log_likelihood}};
}

Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    s.prompt = j.at("prompt").get<std::string>();
    s.completion = j.at("completion").get<std::string>();
    s.full_text = s.prompt + s.completion;
    s.score.value = j.at("score").get<double>();
    s.score.source = score_source_from_string(j.value("score_source", std::string("local-lexicon")));
    s.log_likelihood = j.at("loglik").get<double>();
    return s;
}

}  // namespace

std::string corpus_to_string(const PairCorpus& corpus) {
    std::ostringstream out;
    nlohmann::ordered_json header = corpus.provenance;
    header["filters_applied"] = corpus.filters_applied;
    out << "# " << header.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    for (const auto& p : corpus.pairs) {
        nlohmann::ordered_json j;
        j["pair_id"] = p.pair_id;
        j["toxic"] = sample_json(p.toxic);
        j["nontoxic"] = sample_json(p.nontoxic);
        out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    }
    return out.str();
}

void write_corpus(const std::filesystem::path& path, const PairCorpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus: " + path.string());
    out << corpus_to_string(corpus);
}

PairCorpus corpus_from_string(const std::string& text) {
    PairCorpus corpus;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            if (line[0] == '#') {
                auto header = nlohmann::ordered_json::parse(line.substr(1));
                if (header.contains("filters_applied")) {
                    corpus.filters_applied = header["filters_applied"].get<std::vector<std::string>>();
                    header.erase("filters_applied");
                }
                corpus.provenance = std::move(header);
                continue;
            }
            const auto j = nlohmann::json::parse(line);
            SteeringPair p;
            p.pair_id = j.at("pair_id").get<std::string>();
            p.toxic = sample_from_json(j.at("toxic"));
            p.nontoxic = sample_from_json(j.at("nontoxic"));
            corpus.pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            throw std::runtime_error("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    corpus.validate();
    return corpus;
}

PairCorpus read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return corpus_from_string(ss.str());
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace headsteer
