#include "run_config.hpp"

#include "headsteer/generation.hpp"

#include <fstream>
#include <set>

namespace steerctl {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::string& where, std::set<std::string> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

headsteer::SamplingConfig sampling_from(const json& j, headsteer::SamplingConfig s, const std::string& where) {
    check_keys(j, where, {"top_p", "top_k", "temperature", "max_new_tokens", "n_continuations", "seed"});
    s.top_p = get_or(j, "top_p", s.top_p, where);
    s.top_k = get_or(j, "top_k", s.top_k, where);
    s.temperature = get_or(j, "temperature", s.temperature, where);
    s.max_new_tokens = get_or(j, "max_new_tokens", s.max_new_tokens, where);
    s.n_continuations = get_or(j, "n_continuations", s.n_continuations, where);
    s.seed = get_or(j, "seed", s.seed, where);
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return s;
}

headsteer::ClientMode mode_from(const std::string& s, const std::string& where) {
    if (s == "local") return headsteer::ClientMode::local;
    if (s == "remote") return headsteer::ClientMode::remote;
    throw ConfigError(where + ".mode must be 'local' or 'remote'");
}

const char* mode_name(headsteer::ClientMode m) { return m == headsteer::ClientMode::local ? "local" : "remote"; }

void endpoint_from(const json& j, headsteer::RemoteEndpoint& e, const std::string& where) {
    e.url = get_or(j, "url", e.url, where);
    e.api_key_env = get_or(j, "api_key_env", e.api_key_env, where);
    e.timeout = std::chrono::milliseconds(get_or<long>(j, "timeout_ms", e.timeout.count(), where));
    e.max_attempts = get_or(j, "max_attempts", e.max_attempts, where);
    e.backoff_base = std::chrono::milliseconds(get_or<long>(j, "backoff_ms", e.backoff_base.count(), where));
    e.rate_limit_per_second = get_or(j, "rate_limit_per_second", e.rate_limit_per_second, where);
    e.request_field = get_or(j, "request_field", e.request_field, where);
    e.response_pointer = get_or(j, "response_pointer", e.response_pointer, where);
    if (j.contains("api_key")) throw ConfigError(where + ": API keys are read from the environment only (api_key_env)");
}

ordered_json endpoint_json(const headsteer::RemoteEndpoint& e) {
    return {{"url", e.url},
            {"api_key_env", e.api_key_env},
            {"timeout_ms", e.timeout.count()},
            {"max_attempts", e.max_attempts},
            {"backoff_ms", e.backoff_base.count()},
            {"rate_limit_per_second", e.rate_limit_per_second},
            {"request_field", e.request_field},
            {"response_pointer", e.response_pointer}};
}

const std::set<std::string> kEndpointKeys{"mode",       "url",          "api_key_env",          "timeout_ms",
                                          "max_attempts", "backoff_ms", "rate_limit_per_second", "request_field",
                                          "response_pointer", "api_key"};

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + " is not set");
    if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

}  // namespace

void RunConfig::validate() const {
    require_file(base_model, "model.base");
    require_file(reference_model, "model.reference");
    require_file(tokenizer, "model.tokenizer");
    require_file(lexicon, "lexicon");
    if (substitutions) require_file(*substitutions, "rephraser.substitutions");
    if (!steer.prompts.empty()) require_file(steer.prompts, "steer.prompts");
    if (output_dir.empty()) throw ConfigError("output_dir is not set");
    if (pairs.count < pairs.k)
        throw ConfigError("pairs.count (" + std::to_string(pairs.count) + ") is smaller than pairs.k (" +
                          std::to_string(pairs.k) + ")");
    if (pairs.k == 0) throw ConfigError("pairs.k must be >= 1");
    if (!(pairs.epsilon > 0.0)) throw ConfigError("pairs.epsilon must be > 0");
    if (vectors.m == 0) throw ConfigError("vectors.m must be >= 1");
    if (jobs == 0) throw ConfigError("jobs must be >= 1");
    try {
        fusion.validate();
        if (scorer.mode == headsteer::ClientMode::remote) scorer.remote.validate();
        if (rephraser.mode == headsteer::ClientMode::remote) rephraser.remote.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

RunConfig config_from_json(const json& j, const fs::path& base_dir) {
    check_keys(j, "config", {"model", "lexicon", "output_dir", "seed", "jobs", "scorer", "rephraser", "pairs",
                             "vectors", "fusion", "steer", "sweep"});
    RunConfig c;
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
    c.jobs = get_or(j, "jobs", c.jobs, "config");
    c.output_dir = resolve(base_dir, get_or<std::string>(j, "output_dir", "run", "config"));
    c.lexicon = resolve(base_dir, get_or<std::string>(j, "lexicon", "", "config"));

    const json model = j.value("model", json::object());
    check_keys(model, "model", {"base", "reference", "tokenizer"});
    c.base_model = resolve(base_dir, get_or<std::string>(model, "base", "", "model"));
    c.reference_model = resolve(base_dir, get_or<std::string>(model, "reference", "", "model"));
    c.tokenizer = resolve(base_dir, get_or<std::string>(model, "tokenizer", "", "model"));

    const json scorer = j.value("scorer", json::object());
    check_keys(scorer, "scorer", kEndpointKeys);
    c.scorer.mode = mode_from(get_or<std::string>(scorer, "mode", "local", "scorer"), "scorer");
    c.scorer.remote.api_key_env = "SCORER_API_KEY";
    endpoint_from(scorer, c.scorer.remote, "scorer");

    const json reph = j.value("rephraser", json::object());
    auto reph_keys = kEndpointKeys;
    reph_keys.insert({"substitutions", "placeholder"});
    check_keys(reph, "rephraser", reph_keys);
    c.rephraser.mode = mode_from(get_or<std::string>(reph, "mode", "local", "rephraser"), "rephraser");
    c.rephraser.remote.api_key_env = "REPHRASER_API_KEY";
    endpoint_from(reph, c.rephraser.remote, "rephraser");
    c.rephraser.placeholder = get_or(reph, "placeholder", c.rephraser.placeholder, "rephraser");
    if (reph.contains("substitutions"))
        c.substitutions = resolve(base_dir, get_or<std::string>(reph, "substitutions", "", "rephraser"));

    const json pairs = j.value("pairs", json::object());
    check_keys(pairs, "pairs", {"count", "k", "epsilon", "toxic_cue", "nontoxic_cue", "sampling"});
    c.pairs.count = get_or(pairs, "count", c.pairs.count, "pairs");
    c.pairs.k = get_or(pairs, "k", c.pairs.k, "pairs");
    c.pairs.epsilon = get_or(pairs, "epsilon", c.pairs.epsilon, "pairs");
    c.pairs.toxic_cue = get_or(pairs, "toxic_cue", c.pairs.toxic_cue, "pairs");
    c.pairs.nontoxic_cue = get_or(pairs, "nontoxic_cue", c.pairs.nontoxic_cue, "pairs");
    headsteer::SamplingConfig gen;
    gen.max_new_tokens = 100;
    gen.seed = c.seed;
    c.pairs.sampling = sampling_from(pairs.value("sampling", json::object()), gen, "pairs.sampling");

    const json vec = j.value("vectors", json::object());
    check_keys(vec, "vectors", {"m", "pooling", "include_cue", "probe"});
    c.vectors.m = get_or(vec, "m", c.vectors.m, "vectors");
    const auto pooling = get_or<std::string>(vec, "pooling", "last-token", "vectors");
    if (pooling == "last-token") c.vectors.capture.pooling = headsteer::Pooling::last_token;
    else if (pooling == "mean-completion") c.vectors.capture.pooling = headsteer::Pooling::mean_completion;
    else throw ConfigError("vectors.pooling must be 'last-token' or 'mean-completion'");
    c.vectors.capture.include_cue = get_or(vec, "include_cue", c.vectors.capture.include_cue, "vectors");
    const json probe = vec.value("probe", json::object());
    check_keys(probe, "vectors.probe", {"learning_rate", "epochs", "l2", "train_fraction"});
    c.vectors.probe.learning_rate = get_or(probe, "learning_rate", c.vectors.probe.learning_rate, "vectors.probe");
    c.vectors.probe.epochs = get_or(probe, "epochs", c.vectors.probe.epochs, "vectors.probe");
    c.vectors.probe.l2 = get_or(probe, "l2", c.vectors.probe.l2, "vectors.probe");
    c.vectors.probe.train_fraction = get_or(probe, "train_fraction", c.vectors.probe.train_fraction, "vectors.probe");

    const json fusion = j.value("fusion", json::object());
    check_keys(fusion, "fusion", {"alpha_contr", "head_policy"});
    c.fusion.alpha_contr = get_or(fusion, "alpha_contr", c.fusion.alpha_contr, "fusion");
    try {
        c.fusion.head_policy = headsteer::head_policy_from_string(get_or<std::string>(fusion, "head_policy", "all", "fusion"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("fusion: ") + e.what());
    }

    const json steer = j.value("steer", json::object());
    check_keys(steer, "steer", {"prompts", "sampling"});
    c.steer.prompts = resolve(base_dir, get_or<std::string>(steer, "prompts", "", "steer"));
    headsteer::SamplingConfig ss;
    ss.seed = c.seed;
    c.steer.sampling = sampling_from(steer.value("sampling", json::object()), ss, "steer.sampling");

    const json sweep = j.value("sweep", json::object());
    check_keys(sweep, "sweep", {"alphas", "m_values", "policies"});
    c.sweep.alphas = get_or(sweep, "alphas", c.sweep.alphas, "sweep");
    c.sweep.m_values = get_or(sweep, "m_values", c.sweep.m_values, "sweep");
    if (sweep.contains("policies")) {
        c.sweep.policies.clear();
        for (const auto& p : get_or<std::vector<std::string>>(sweep, "policies", {}, "sweep"))
            c.sweep.policies.push_back(headsteer::head_policy_from_string(p));
    }
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (j.contains("config") && j.contains("artifacts")) j = j.at("config");  // run manifest
    return config_from_json(j, fs::absolute(path).parent_path());
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["model"] = {{"base", c.base_model.string()},
                  {"reference", c.reference_model.string()},
                  {"tokenizer", c.tokenizer.string()}};
    j["lexicon"] = c.lexicon.string();
    j["output_dir"] = c.output_dir.string();
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    auto scorer = endpoint_json(c.scorer.remote);
    scorer["mode"] = mode_name(c.scorer.mode);
    j["scorer"] = scorer;
    auto reph = endpoint_json(c.rephraser.remote);
    reph["mode"] = mode_name(c.rephraser.mode);
    reph["placeholder"] = c.rephraser.placeholder;
    if (c.substitutions) reph["substitutions"] = c.substitutions->string();
    j["rephraser"] = reph;
    j["pairs"] = {{"count", c.pairs.count},
                  {"k", c.pairs.k},
                  {"epsilon", c.pairs.epsilon},
                  {"toxic_cue", c.pairs.toxic_cue},
                  {"nontoxic_cue", c.pairs.nontoxic_cue},
                  {"sampling", headsteer::to_json(c.pairs.sampling)}};
    j["vectors"] = {{"m", c.vectors.m},
                    {"pooling", c.vectors.capture.pooling == headsteer::Pooling::last_token ? "last-token" : "mean-completion"},
                    {"include_cue", c.vectors.capture.include_cue},
                    {"probe",
                     {{"learning_rate", c.vectors.probe.learning_rate},
                      {"epochs", c.vectors.probe.epochs},
                      {"l2", c.vectors.probe.l2},
                      {"train_fraction", c.vectors.probe.train_fraction}}}};
    j["fusion"] = {{"alpha_contr", c.fusion.alpha_contr}, {"head_policy", headsteer::to_string(c.fusion.head_policy)}};
    j["steer"] = {{"prompts", c.steer.prompts.string()}, {"sampling", headsteer::to_json(c.steer.sampling)}};
    auto policies = ordered_json::array();
    for (auto p : c.sweep.policies) policies.push_back(headsteer::to_string(p));
    j["sweep"] = {{"alphas", c.sweep.alphas}, {"m_values", c.sweep.m_values}, {"policies", policies}};
    return j;
}

}  // namespace steerctl
