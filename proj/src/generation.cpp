#include "headsteer/generation.hpp"

#include "headsteer/parallel.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

namespace headsteer {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

double GenerationRecord::total_seconds() const {
    double total = prompt_seconds;
    for (const auto& c : continuations) total += c.seconds;
    return total;
}

GenerationRecord steered_generate(const Model& model, const Tokenizer& tokenizer,
                                  const InterventionMap* interventions, const std::string& prompt,
                                  const SamplingConfig& sampling, unsigned jobs) {
    sampling.validate();
    if (tokenizer.bos_id() < 0) throw std::invalid_argument("tokenizer has no <|bos|> token");
    if (tokenizer.vocab_size() != model.config.vocab_size)
        throw std::invalid_argument("tokenizer and model vocabulary sizes differ");
    if (interventions != nullptr && interventions->empty()) interventions = nullptr;

    std::vector<std::int32_t> context{tokenizer.bos_id()};
    const auto prompt_ids = tokenizer.encode(prompt);
    context.insert(context.end(), prompt_ids.begin(), prompt_ids.end());
    if (context.size() > model.config.max_seq_len)
        throw std::invalid_argument("prompt exceeds the model context window");
    const auto eos = tokenizer.find("<|eos|>");

    GenerationRecord record;
    record.prompt = prompt;
    record.sampling = sampling;

    // The prompt prefix is shared; each continuation copies its cache.
    const auto t0 = Clock::now();
    DecoderCache prefix_cache(model.config);
    ForwardOptions prefix_opt;
    prefix_opt.interventions = interventions;
    prefix_opt.cache = &prefix_cache;
    prefix_opt.last_logits_only = true;
    const auto prefix = forward(model, context, prefix_opt);
    record.prompt_seconds = seconds_since(t0);

    record.continuations.resize(sampling.n_continuations);
    parallel_for(sampling.n_continuations, jobs, [&](std::size_t index) {
        const auto start = Clock::now();
        Continuation& cont = record.continuations[index];
        StreamRng rng(sampling.seed, index);
        DecoderCache cache = prefix_cache;
        std::vector<float> logits(prefix.logits.row(0).begin(), prefix.logits.row(0).end());
        ForwardOptions opt;
        opt.interventions = interventions;
        opt.cache = &cache;
        opt.last_logits_only = true;
        for (std::uint32_t step = 0; step < sampling.max_new_tokens; ++step) {
            const auto probs = nucleus_filter(logits, sampling.top_p, sampling.top_k, sampling.temperature);
            const std::int32_t token = sample_index(probs, rng.uniform());
            if (eos && token == *eos) break;
            cont.tokens.push_back(token);
            if (step + 1 == sampling.max_new_tokens) break;
            if (cache.length() >= model.config.max_seq_len) {
                cont.overflow = true;
                break;
            }
            const std::int32_t next[1] = {token};
            auto out = forward(model, next, opt);
            logits.assign(out.logits.row(0).begin(), out.logits.row(0).end());
        }
        cont.text = tokenizer.decode(cont.tokens);
        cont.seconds = seconds_since(start);
    });
    return record;
}

nlohmann::ordered_json to_json(const SamplingConfig& s) {
    return {{"top_p", s.top_p},
            {"top_k", s.top_k},
            {"temperature", s.temperature},
            {"max_new_tokens", s.max_new_tokens},
            {"n_continuations", s.n_continuations},
            {"seed", s.seed}};
}

SamplingConfig sampling_from_json(const nlohmann::json& j) {
    SamplingConfig s;
    s.top_p = j.value("top_p", s.top_p);
    s.top_k = j.value("top_k", s.top_k);
    s.temperature = j.value("temperature", s.temperature);
    s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
    s.n_continuations = j.value("n_continuations", s.n_continuations);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

nlohmann::ordered_json to_json(const GenerationRecord& r, bool with_timing) {
    nlohmann::ordered_json j;
    j["prompt"] = r.prompt;
    auto conts = nlohmann::ordered_json::array();
    for (const auto& c : r.continuations) {
        nlohmann::ordered_json cj;
        cj["text"] = c.text;
        cj["tokens"] = c.tokens;
        if (c.overflow) cj["overflow"] = true;
        if (with_timing) cj["seconds"] = c.seconds;
        conts.push_back(std::move(cj));
    }
    j["continuations"] = std::move(conts);
    j["sampling"] = to_json(r.sampling);
    j["seed"] = r.sampling.seed;
    j["fusion"] = r.fusion;
    if (with_timing) j["prompt_seconds"] = r.prompt_seconds;
    return j;
}

GenerationRecord record_from_json(const nlohmann::json& j) {
    GenerationRecord r;
    r.prompt = j.at("prompt").get<std::string>();
    r.sampling = sampling_from_json(j.at("sampling"));
    r.fusion = j.value("fusion", nlohmann::ordered_json::object());
    r.prompt_seconds = j.value("prompt_seconds", 0.0);
    const auto& conts = j.at("continuations");
    if (!conts.is_array()) throw std::runtime_error("'continuations' must be an array");
    for (const auto& cj : conts) {
        Continuation c;
        c.text = cj.at("text").get<std::string>();
        c.tokens = cj.value("tokens", std::vector<std::int32_t>{});
        c.overflow = cj.value("overflow", false);
        c.seconds = cj.value("seconds", 0.0);
        r.continuations.push_back(std::move(c));
    }
    if (r.continuations.size() != r.sampling.n_continuations)
        throw std::runtime_error("continuation count does not match n_continuations");
    return r;
}

void write_records(const std::filesystem::path& path, const std::vector<GenerationRecord>& records,
                   bool with_timing) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write records: " + path.string());
    for (const auto& r : records) out << to_json(r, with_timing).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

std::vector<GenerationRecord> read_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open records: " + path.string());
    std::vector<GenerationRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

void write_timing(const std::filesystem::path& path, const std::vector<GenerationRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write timing: " + path.string());
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["prompt_seconds"] = r.prompt_seconds;
        auto secs = nlohmann::ordered_json::array();
        for (const auto& c : r.continuations) secs.push_back(c.seconds);
        j["seconds"] = std::move(secs);
        out << j.dump() << '\n';
    }
}

void apply_timing(const std::filesystem::path& path, std::vector<GenerationRecord>& records) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open timing: " + path.string());
    std::string line;
    std::size_t i = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (i >= records.size()) throw std::runtime_error(path.string() + ": more timing lines than records");
        const auto j = nlohmann::json::parse(line);
        auto& r = records[i++];
        r.prompt_seconds = j.at("prompt_seconds").get<double>();
        const auto secs = j.at("seconds").get<std::vector<double>>();
        if (secs.size() != r.continuations.size())
            throw std::runtime_error(path.string() + ":" + std::to_string(i) + ": continuation count mismatch");
        for (std::size_t k = 0; k < secs.size(); ++k) r.continuations[k].seconds = secs[k];
    }
    if (i != records.size()) throw std::runtime_error(path.string() + ": fewer timing lines than records");
}

}  // namespace headsteer
