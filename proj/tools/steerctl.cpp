// steerctl: offline-reproducible driver for pair generation, vector
// extraction, steered generation, evaluation and sweeps.

#include "run_config.hpp"

#include "headsteer/generation.hpp"
#include "headsteer/metrics.hpp"
#include "headsteer/model.hpp"
#include "headsteer/pairs.hpp"
#include "headsteer/scoring.hpp"
#include "headsteer/steer.hpp"
#include "headsteer/tokenizer.hpp"
#include "headsteer/vectors.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace headsteer;
using steerctl::ConfigError;
using steerctl::RunConfig;

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2, kRemote = 3 };

std::string num(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Four significant digits for human-facing tables.
std::string brief(double v) {
    std::ostringstream o;
    o << std::setprecision(4) << v;
    return o.str();
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + path.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::ostringstream hex;
    for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_json(const fs::path& path, const ordered_json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

class Run {
  public:
    explicit Run(RunConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        fs::create_directories(cfg_.output_dir);
    }

    RunConfig& cfg() { return cfg_; }
    fs::path out(const std::string& name) const { return cfg_.output_dir / name; }

    const Model& base() {
        if (!base_) base_ = load_model(cfg_.base_model);
        return *base_;
    }
    const Model& reference() {
        if (!reference_) reference_ = load_model(cfg_.reference_model);
        return *reference_;
    }
    const Tokenizer& tokenizer() {
        if (!tokenizer_) tokenizer_ = Tokenizer::load(cfg_.tokenizer);
        return *tokenizer_;
    }
    const Lexicon& lexicon() {
        if (!lexicon_) lexicon_ = Lexicon::load(cfg_.lexicon);
        return *lexicon_;
    }
    Scorer& scorer() {
        if (!scorer_) scorer_ = make_scorer(cfg_.scorer, lexicon());
        return *scorer_;
    }
    Rephraser& rephraser() {
        if (!rephraser_) {
            auto rc = cfg_.rephraser;
            if (cfg_.substitutions) rc.substitutions = parse_substitutions(read_text(*cfg_.substitutions));
            rephraser_ = make_rephraser(rc, lexicon());
        }
        return *rephraser_;
    }

    std::string config_hash() const {
        const auto text = steerctl::to_json(cfg_).dump();
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
        return buf;
    }

    /// Records the resolved config and artifact hashes in manifest.json.
    void record(const std::string& command, const std::vector<fs::path>& artifacts) {
        const auto path = out("manifest.json");
        ordered_json m;
        if (fs::exists(path)) m = ordered_json::parse(read_text(path));
        m["tool"] = "steerctl";
        m["config"] = steerctl::to_json(cfg_);
        if (!m.contains("commands")) m["commands"] = ordered_json::array();
        if (std::find(m["commands"].begin(), m["commands"].end(), command) == m["commands"].end())
            m["commands"].push_back(command);
        if (!m.contains("artifacts")) m["artifacts"] = ordered_json::object();
        for (const auto& a : artifacts) m["artifacts"][a.filename().string()] = sha256_file(a);
        write_json(path, m);
    }

  private:
    RunConfig cfg_;
    std::optional<Model> base_, reference_;
    std::optional<Tokenizer> tokenizer_;
    std::optional<Lexicon> lexicon_;
    std::unique_ptr<Scorer> scorer_;
    std::unique_ptr<Rephraser> rephraser_;
};

// Tags errors with the pipeline stage that raised them, keeping the type.
template <class F>
auto stage(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const RemoteClientError& e) {
        throw RemoteClientError("stage " + name + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("stage " + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error("stage " + name + ": " + e.what());
    }
}

// ---------------------------------------------------------------- gen-pairs

int cmd_gen_pairs(Run& run) {
    auto& cfg = run.cfg();
    const auto& model = run.base();
    const auto& tok = run.tokenizer();

    const auto texts = stage("generate", [&] {
        return generate_unconditional(model, tok, cfg.pairs.count, cfg.pairs.sampling, cfg.pairs.sampling.seed, cfg.jobs);
    });

    std::vector<ScoredText> scored;
    std::size_t unscored = 0;
    stage("score", [&] {
        const auto items = run.scorer().score(texts);
        std::ofstream out(run.out("generated.jsonl"));
        for (std::size_t i = 0; i < texts.size(); ++i) {
            ordered_json j{{"index", i}, {"text", texts[i]}};
            if (items[i].score) {
                j["score"] = items[i].score->value;
                scored.push_back({texts[i], items[i].score->value});
            } else {
                j["error"] = items[i].error;
                ++unscored;
            }
            out << j.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        }
        if (scored.empty()) throw RemoteClientError("no generated text could be scored");
        return 0;
    });

    const auto selected = stage("select", [&] { return select_top_toxic(scored, std::min(cfg.pairs.k, scored.size())); });

    const auto parallel = stage("rephrase", [&] {
        auto result = build_parallel(selected, run.rephraser());
        std::ofstream out(run.out("candidates.jsonl"));
        for (const auto& c : result.candidates)
            out << ordered_json{{"index", c.source_index},
                                {"toxic", c.toxic.text},
                                {"toxic_score", c.toxic.score},
                                {"nontoxic", c.nontoxic},
                                {"degenerate", c.degenerate}}
                       .dump(-1, ' ', false, json::error_handler_t::replace)
                << '\n';
        for (const auto& f : result.failures)
            out << ordered_json{{"index", f.source_index}, {"error", f.error}}.dump() << '\n';
        return result;
    });

    FilterLog log;
    auto corpus = stage("filter", [&] {
        return filter_by_likelihood(parallel.candidates, model, tok, run.scorer(), cfg.pairs.epsilon, &log);
    });
    corpus = integrate_prompts(std::move(corpus), cfg.pairs.toxic_cue, cfg.pairs.nontoxic_cue);
    if (!cfg.pairs.toxic_cue.empty() || !cfg.pairs.nontoxic_cue.empty()) corpus.filters_applied.push_back("cue-prompts");

    corpus.provenance = {{"base_model_sha256", sha256_file(cfg.base_model)},
                         {"tokenizer_sha256", sha256_file(cfg.tokenizer)},
                         {"lexicon_sha256", sha256_file(cfg.lexicon)},
                         {"scorer", cfg.scorer.mode == ClientMode::local ? "local-lexicon" : "remote"},
                         {"rephraser", cfg.rephraser.mode == ClientMode::local ? "local" : "remote"},
                         {"seed", cfg.pairs.sampling.seed},
                         {"count", cfg.pairs.count},
                         {"k", cfg.pairs.k},
                         {"epsilon", cfg.pairs.epsilon},
                         {"toxic_cue", cfg.pairs.toxic_cue},
                         {"nontoxic_cue", cfg.pairs.nontoxic_cue},
                         {"sampling", to_json(cfg.pairs.sampling)},
                         {"stage_counts",
                          {{"generated", texts.size()},
                           {"scored", scored.size()},
                           {"selected", selected.size()},
                           {"paired", parallel.candidates.size()},
                           {"rephrase_failures", parallel.failures.size()},
                           {"filtered", corpus.pairs.size()},
                           {"dropped_band", log.dropped_band},
                           {"dropped_degenerate", log.dropped_degenerate},
                           {"dropped_unscored", log.dropped_unscored}}}};
    stage("write", [&] {
        corpus.validate();
        write_corpus(run.out("corpus.jsonl"), corpus);
        return 0;
    });
    run.record("gen-pairs", {run.out("generated.jsonl"), run.out("candidates.jsonl"), run.out("corpus.jsonl")});

    std::cout << "generated " << texts.size() << "  scored " << scored.size() << " (" << unscored << " failed)"
              << "  selected " << selected.size() << "  paired " << parallel.candidates.size() << " ("
              << parallel.failures.size() << " failed)"
              << "  filtered " << corpus.pairs.size() << " (band " << log.dropped_band << ", degenerate "
              << log.dropped_degenerate << ")\n"
              << "wrote " << run.out("corpus.jsonl").string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- extract

struct ExtractOutputs {
    fs::path vectors, probes, heatmap, pca;
};

ExtractOutputs extract_with(Run& run, const fs::path& corpus_path, std::size_t m, const std::string& suffix) {
    auto& cfg = run.cfg();
    const auto corpus = read_corpus(corpus_path);
    if (corpus.pairs.size() < m)
        throw std::invalid_argument("insufficient pairs: corpus has " + std::to_string(corpus.pairs.size()) +
                                    ", m = " + std::to_string(m));
    const auto subset = sample_pairs(corpus, m, cfg.seed);
    const auto hash = fnv1a64(corpus_to_string(subset));
    const auto& model = run.base();
    const auto capture = capture_pair_activations(model, run.tokenizer(), subset, cfg.vectors.capture, cfg.jobs);
    if (!capture.truncated.empty())
        std::cerr << "warning: " << capture.truncated.size() << " pair(s) left-truncated to the context window\n";

    auto vectors = compute_detox_vectors(capture.activations, tap_sites(model.config), model.config.d_head);
    vectors.corpus_hash = hash;
    auto probes = train_probes(capture.activations, model.config, cfg.seed, cfg.vectors.probe, cfg.jobs);
    probes.corpus_hash = hash;

    ExtractOutputs o{run.out("vectors" + suffix + ".stvz"), run.out("probes" + suffix + ".stvp"),
                     run.out("heatmap" + suffix + ".csv"), run.out("pca" + suffix + ".csv")};
    save_vectors(o.vectors, vectors);
    save_probes(o.probes, probes);
    write_heatmap_csv(o.heatmap, probes);

    // PCA of the site whose probe separates best
    const auto sites = tap_sites(model.config);
    std::size_t best = 0;
    for (std::size_t i = 1; i < probes.probes.size(); ++i)
        if (probes.probes[i].accuracy > probes.probes[best].accuracy) best = i;
    std::vector<std::vector<float>> rows;
    std::vector<Label> labels;
    for (const auto& a : capture.activations)
        if (a.site == sites[best]) {
            rows.push_back(a.vector);
            labels.push_back(a.label);
        }
    write_pca_csv(o.pca, pca_project(rows, std::min<std::size_t>(2, rows.size())), labels);

    double mean_acc = 0.0;
    for (const auto& p : probes.probes) mean_acc += p.accuracy / static_cast<double>(probes.probes.size());
    std::cout << "pairs " << m << "  sites " << sites.size() << "  mean probe accuracy " << num(mean_acc)
              << "  best " << to_string(sites[best]) << ' ' << num(probes.probes[best].accuracy) << '\n';
    return o;
}

int cmd_extract(Run& run, const std::string& corpus_arg) {
    const fs::path corpus = corpus_arg.empty() ? run.out("corpus.jsonl") : fs::path(corpus_arg);
    if (!fs::exists(corpus)) throw std::invalid_argument(corpus.string() + " not found (run gen-pairs first)");
    const auto o = extract_with(run, corpus, run.cfg().vectors.m, "");
    run.record("extract", {o.vectors, o.probes, o.heatmap, o.pca});
    std::cout << "wrote " << o.vectors.string() << ", " << o.probes.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- steer

std::vector<std::string> read_prompts(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open prompts: " + path.string());
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) prompts.push_back(line);
    if (prompts.empty()) throw std::invalid_argument("prompts file is empty: " + path.string());
    return prompts;
}

std::string records_name(double alpha, HeadPolicy policy, const std::string& suffix) {
    return "records_a" + num(alpha) + "_" + to_string(policy) + suffix + ".jsonl";
}

fs::path timing_path(const fs::path& records) {
    auto p = records;
    p.replace_extension(".timing.jsonl");
    return p;
}

fs::path steer_with(Run& run, const fs::path& vectors_path, const fs::path& probes_path, const FusionConfig& fusion,
                    const fs::path& records_path) {
    auto& cfg = run.cfg();
    for (const auto& p : {vectors_path, probes_path})
        if (!fs::exists(p)) throw std::invalid_argument(p.string() + " not found (run extract first)");
    if (cfg.steer.prompts.empty()) throw std::invalid_argument("steer.prompts is not set");
    const auto& model = run.base();
    const auto vectors = load_vectors(vectors_path);
    const auto probes = load_probes(probes_path);
    check_compatible(model.config, vectors.n_layers, vectors.n_heads, vectors.d_head, "vector set " + vectors_path.string());
    check_compatible(model.config, probes.n_layers, probes.n_heads, probes.d_head, "probe set " + probes_path.string());
    const auto weights = build_fusion_weights(probes, fusion.head_policy);
    const auto interventions = build_intervention(vectors, weights, fusion);

    auto fusion_json = to_json(fusion);
    fusion_json["m_used"] = vectors.m_used;
    fusion_json["sites_fused"] = interventions.size();
    std::vector<GenerationRecord> records;
    for (const auto& prompt : read_prompts(cfg.steer.prompts)) {
        auto r = steered_generate(model, run.tokenizer(), &interventions, prompt, cfg.steer.sampling, cfg.jobs);
        r.fusion = fusion_json;
        records.push_back(std::move(r));
    }
    write_records(records_path, records, false);
    write_timing(timing_path(records_path), records);
    return records_path;
}

int cmd_steer(Run& run, const std::string& out_name) {
    const auto& f = run.cfg().fusion;
    const auto path = run.out(out_name.empty() ? records_name(f.alpha_contr, f.head_policy, "") : out_name);
    steer_with(run, run.out("vectors.stvz"), run.out("probes.stvp"), f, path);
    run.record("steer", {path});
    std::cout << "wrote " << path.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- eval

struct Evaluation {
    MetricBundle bundle;
    double mean_score_se = 0.0;
    double alpha = 0.0;
    std::string head_policy;
    fs::path metrics_path;
};

Evaluation evaluate(Run& run, const fs::path& records_path) {
    const auto records = read_records(records_path);
    if (records.empty()) throw std::invalid_argument(records_path.string() + ": records file is empty");

    std::vector<std::string> texts;
    std::vector<PplInput> ppl_inputs;
    std::vector<std::vector<std::string>> groups;
    for (const auto& r : records) {
        groups.emplace_back();
        for (const auto& c : r.continuations) {
            texts.push_back(c.text);
            ppl_inputs.push_back({r.prompt, c.text});
            groups.back().push_back(c.text);
        }
    }
    const auto items = run.scorer().score(texts);
    ScoreMatrix scores;
    std::size_t k = 0;
    for (const auto& r : records) {
        scores.emplace_back();
        for (std::size_t i = 0; i < r.continuations.size(); ++i, ++k) {
            if (!items[k].score) throw RemoteClientError("scoring failed for " + records_path.string() + ": " + items[k].error);
            scores.back().push_back(items[k].score->value);
        }
    }

    Evaluation ev;
    auto& b = ev.bundle;
    b.emt = emt(scores);
    b.tp = tp(scores);
    std::vector<double> prompt_means;
    for (const auto& row : scores) {
        double s = 0.0;
        for (double v : row) s += v;
        prompt_means.push_back(row.empty() ? 0.0 : s / static_cast<double>(row.size()));
    }
    double total = 0.0;
    for (double v : prompt_means) total += v;
    b.mean_score = total / static_cast<double>(prompt_means.size());
    if (prompt_means.size() > 1) {
        double var = 0.0;
        for (double v : prompt_means) var += (v - b.mean_score) * (v - b.mean_score);
        var /= static_cast<double>(prompt_means.size() - 1);
        ev.mean_score_se = std::sqrt(var / static_cast<double>(prompt_means.size()));
    }
    b.ppl = ppl(run.reference(), run.tokenizer(), ppl_inputs, run.cfg().jobs);
    b.dist1 = dist_n(groups, 1).value;
    b.dist2 = dist_n(groups, 2).value;
    const auto d3 = dist_n(groups, 3);
    b.dist3 = d3.value;
    if (!d3.short_groups.empty())
        std::cerr << "warning: " << d3.short_groups.size() << " prompt(s) have no 3-grams; they count as 0 in dist-3\n";
    b.n_prompts = records.size();
    b.n_continuations = records.front().continuations.size();

    ev.alpha = records.front().fusion.value("alpha_contr", 0.0);
    ev.head_policy = records.front().fusion.value("head_policy", "all");
    auto stem = records_path.filename().string();
    if (stem.size() > 6 && stem.substr(stem.size() - 6) == ".jsonl") stem.resize(stem.size() - 6);
    ev.metrics_path = records_path.parent_path() / (stem + ".metrics.json");
    auto j = to_json(b);
    j["mean_score_se"] = ev.mean_score_se;
    j["toxicity_source"] = run.cfg().scorer.mode == ClientMode::local ? "local-lexicon" : "remote";
    j["fusion"] = records.front().fusion;
    j["records_sha256"] = sha256_file(records_path);
    j["config_hash"] = run.config_hash();
    write_json(ev.metrics_path, j);
    return ev;
}

void print_bundle(const std::string& label, const Evaluation& ev) {
    const auto& b = ev.bundle;
    std::cout << std::left << std::setw(28) << label << " emt " << std::setw(8) << num(std::round(b.emt * 1e4) / 1e4)
              << " tp " << std::setw(7) << num(std::round(b.tp * 1e4) / 1e4) << " mean " << std::setw(8)
              << num(std::round(b.mean_score * 1e4) / 1e4) << " ppl " << std::setw(8) << num(std::round(b.ppl * 1e3) / 1e3)
              << " dist-1/2/3 " << num(std::round(b.dist1 * 1e3) / 1e3) << '/' << num(std::round(b.dist2 * 1e3) / 1e3)
              << '/' << num(std::round(b.dist3 * 1e3) / 1e3) << '\n';
}

fs::path write_tradeoff(Run& run, const std::vector<Evaluation>& evals, const std::string& name) {
    std::vector<SweepPoint> sweep;
    for (const auto& e : evals) sweep.push_back({e.alpha, e.bundle.mean_score, e.bundle.ppl});
    const auto path = run.out(name);
    write_tradeoff_csv(path, tradeoff_curve(sweep));
    return path;
}

int cmd_eval(Run& run, const std::vector<std::string>& record_files) {
    if (record_files.empty()) throw std::invalid_argument("eval needs at least one records file");
    std::vector<Evaluation> evals;
    std::vector<fs::path> artifacts;
    for (const auto& f : record_files) {
        evals.push_back(evaluate(run, f));
        artifacts.push_back(evals.back().metrics_path);
        print_bundle(fs::path(f).filename().string(), evals.back());
    }
    std::set<double> alphas;
    for (const auto& e : evals) alphas.insert(e.alpha);
    if (alphas.size() >= 2 && alphas.count(0.0)) {
        artifacts.push_back(write_tradeoff(run, evals, "tradeoff.csv"));
        std::cout << "wrote " << artifacts.back().string() << '\n';
    }
    run.record("eval", artifacts);
    return kOk;
}

// ---------------------------------------------------------------- sweep

ordered_json eval_json(const Evaluation& e) {
    auto j = to_json(e.bundle);
    j["mean_score_se"] = e.mean_score_se;
    return j;
}

int cmd_sweep(Run& run, const std::string& over) {
    auto& cfg = run.cfg();
    std::vector<fs::path> artifacts;
    ordered_json summary;
    summary["over"] = over;
    summary["points"] = ordered_json::array();

    if (over == "alpha") {
        std::set<double> alphas(cfg.sweep.alphas.begin(), cfg.sweep.alphas.end());
        alphas.insert(0.0);
        alphas.insert(cfg.fusion.alpha_contr);
        std::vector<Evaluation> evals;
        for (double a : alphas) {
            FusionConfig f = cfg.fusion;
            f.alpha_contr = a;
            const auto path = steer_with(run, run.out("vectors.stvz"), run.out("probes.stvp"), f,
                                         run.out(records_name(a, f.head_policy, "")));
            evals.push_back(evaluate(run, path));
            print_bundle("alpha " + num(a), evals.back());
            artifacts.insert(artifacts.end(), {path, evals.back().metrics_path});
            summary["points"].push_back({{"alpha", a}, {"metrics", eval_json(evals.back())}});
        }
        artifacts.push_back(write_tradeoff(run, evals, "tradeoff.csv"));
    } else if (over == "m") {
        for (auto m : cfg.sweep.m_values) {
            const std::string suffix = "_m" + std::to_string(m);
            const auto o = extract_with(run, run.out("corpus.jsonl"), m, suffix);
            const auto path = steer_with(run, o.vectors, o.probes, cfg.fusion,
                                         run.out(records_name(cfg.fusion.alpha_contr, cfg.fusion.head_policy, suffix)));
            const auto ev = evaluate(run, path);
            print_bundle("m " + std::to_string(m), ev);
            artifacts.insert(artifacts.end(), {o.vectors, o.probes, path, ev.metrics_path});
            summary["points"].push_back({{"m", m}, {"metrics", eval_json(ev)}});
        }
    } else if (over == "policy") {
        for (auto policy : cfg.sweep.policies) {
            FusionConfig f = cfg.fusion;
            f.head_policy = policy;
            const auto path = steer_with(run, run.out("vectors.stvz"), run.out("probes.stvp"), f,
                                         run.out(records_name(f.alpha_contr, policy, "")));
            const auto ev = evaluate(run, path);
            print_bundle(std::string("policy ") + to_string(policy), ev);
            artifacts.insert(artifacts.end(), {path, ev.metrics_path});
            summary["points"].push_back({{"head_policy", to_string(policy)}, {"metrics", eval_json(ev)}});
        }
    } else {
        throw std::invalid_argument("unknown sweep dimension '" + over + "'");
    }
    const auto summary_path = run.out("sweep_" + over + ".json");
    write_json(summary_path, summary);
    artifacts.push_back(summary_path);
    run.record("sweep-" + over, artifacts);
    std::cout << "wrote " << summary_path.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- report

int cmd_report(Run& run) {
    auto& cfg = run.cfg();
    const auto& model = run.base();
    ordered_json report;

    struct Arch {
        const char* name;
        MemorySpec spec;
    };
    std::vector<Arch> archs{{"toy base model",
                             {model.config.n_layers, model.config.n_heads, model.config.d_head, 4}},
                            {"GPT2-large", {36, 20, 64, 4}},
                            {"GPT2-XL", {48, 25, 64, 4}},
                            {"LLaMA2-7B", {32, 32, 128, 4}},
                            {"LLaMA2-13B", {40, 40, 128, 4}}};
    std::ostringstream md;
    md << "# steering run report\n\n## memory footprint of the detoxification vectors\n\n"
       << "| model | N_l | N_h | D_h | per head (B) | total (KiB) |\n|---|---|---|---|---|---|\n";
    report["memory"] = ordered_json::array();
    for (const auto& a : archs) {
        const auto f = memory_footprint(a.spec);
        md << "| " << a.name << " | " << a.spec.n_layers << " | " << a.spec.n_heads << " | " << a.spec.d_head << " | "
           << f.per_head_bytes << " | " << num(f.total_kib()) << " |\n";
        report["memory"].push_back({{"model", a.name},
                                    {"n_layers", a.spec.n_layers},
                                    {"n_heads", a.spec.n_heads},
                                    {"d_head", a.spec.d_head},
                                    {"per_head_bytes", f.per_head_bytes},
                                    {"total_kib", f.total_kib()}});
    }

    const auto base_path = run.out(records_name(0.0, cfg.fusion.head_policy, ""));
    const auto steered_path = run.out(records_name(cfg.fusion.alpha_contr, cfg.fusion.head_policy, ""));
    if (fs::exists(base_path) && fs::exists(steered_path) && fs::exists(timing_path(base_path)) &&
        fs::exists(timing_path(steered_path)) && base_path != steered_path) {
        auto base = read_records(base_path);
        auto steered = read_records(steered_path);
        apply_timing(timing_path(base_path), base);
        apply_timing(timing_path(steered_path), steered);
        const auto t = timing_report(base, steered);
        md << "\n## inference time\n\nbase " << brief(t.base_seconds) << " s, steered " << brief(t.steered_seconds)
           << " s, ratio " << brief(t.ratio) << "\n";
        report["timing"] = {{"base_seconds", t.base_seconds}, {"steered_seconds", t.steered_seconds}, {"ratio", t.ratio}};
    }

    std::vector<fs::path> metric_files;
    for (const auto& entry : fs::directory_iterator(cfg.output_dir)) {
        const auto name = entry.path().filename().string();
        if (name.size() > 13 && name.substr(name.size() - 13) == ".metrics.json") metric_files.push_back(entry.path());
    }
    std::sort(metric_files.begin(), metric_files.end());
    if (!metric_files.empty()) {
        md << "\n## metrics\n\n| records | EMT | TP | mean score | PPL | dist-1 | dist-2 | dist-3 |\n"
           << "|---|---|---|---|---|---|---|---|\n";
        report["metrics"] = ordered_json::object();
        for (const auto& p : metric_files) {
            const auto j = json::parse(read_text(p));
            const auto b = metric_bundle_from_json(j);
            md << "| " << p.filename().string() << " | " << brief(b.emt) << " | " << brief(b.tp) << " | "
               << brief(b.mean_score) << " | " << brief(b.ppl) << " | " << brief(b.dist1) << " | " << brief(b.dist2)
               << " | " << brief(b.dist3) << " |\n";
            report["metrics"][p.filename().string()] = to_json(b);
        }
    }
    const auto md_path = run.out("report.md");
    std::ofstream(md_path) << md.str();
    const auto json_path = run.out("report.json");
    write_json(json_path, report);
    run.record("report", {md_path, json_path});
    std::cout << md.str();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Head-wise activation steering toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> alpha;
    std::optional<std::size_t> m;
    std::optional<std::string> policy;
    std::optional<unsigned> jobs;
    std::string output_dir;
    bool offline = false;
    app.add_option("--config", config_path, "run configuration (JSON) or a run manifest")->required();
    app.add_option("--seed", seed, "seed for every stochastic stage");
    app.add_option("--alpha", alpha, "fusion strength alpha_contr");
    app.add_option("--m", m, "number of steering pairs");
    app.add_option("--head-policy", policy, "all, uniform, top-half or bottom-half")
        ->check(CLI::IsMember({"all", "uniform", "top-half", "bottom-half"}));
    app.add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--output-dir", output_dir, "override the configured output directory");
    app.add_flag("--offline", offline, "force local scorer and rephraser");

    auto* gen = app.add_subcommand("gen-pairs", "build the steering-pair corpus");
    std::string corpus_arg;
    auto* extract = app.add_subcommand("extract", "compute detoxification vectors and probes");
    extract->add_option("--corpus", corpus_arg, "corpus file (default: <output_dir>/corpus.jsonl)");
    std::string records_out;
    auto* steer = app.add_subcommand("steer", "generate steered continuations");
    steer->add_option("--out", records_out, "records file name inside the output directory");
    std::vector<std::string> record_files;
    auto* eval = app.add_subcommand("eval", "score records and compute metrics");
    eval->add_option("records", record_files, "records files")->required();
    std::string over = "alpha";
    auto* sweep = app.add_subcommand("sweep", "steer and evaluate across a parameter grid");
    sweep->add_option("--over", over, "alpha, m or policy")->check(CLI::IsMember({"alpha", "m", "policy"}));
    auto* report = app.add_subcommand("report", "memory, timing and metric summary");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kValidation;
    }

    try {
        auto cfg = steerctl::load_config(config_path);
        if (seed) {
            cfg.seed = *seed;
            cfg.pairs.sampling.seed = *seed;
            cfg.steer.sampling.seed = *seed;
        }
        if (alpha) cfg.fusion.alpha_contr = *alpha;
        if (m) cfg.vectors.m = *m;
        if (policy) cfg.fusion.head_policy = head_policy_from_string(*policy);
        if (jobs) cfg.jobs = *jobs;
        if (!output_dir.empty()) cfg.output_dir = fs::absolute(output_dir).lexically_normal();
        if (offline) {
            cfg.scorer.mode = ClientMode::local;
            cfg.rephraser.mode = ClientMode::local;
        }
        Run run(std::move(cfg));
        if (*gen) return cmd_gen_pairs(run);
        if (*extract) return cmd_extract(run, corpus_arg);
        if (*steer) return cmd_steer(run, records_out);
        if (*eval) return cmd_eval(run, record_files);
        if (*sweep) return cmd_sweep(run, over);
        if (*report) return cmd_report(run);
    } catch (const RemoteClientError& e) {
        std::cerr << "error (remote client): " << e.what() << '\n';
        return kRemote;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const ModelError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kRuntime;
}
