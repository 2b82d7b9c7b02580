#include "headsteer/vectors.hpp"

#include "binio.hpp"
#include "numfmt.hpp"
#include "headsteer/parallel.hpp"
#include "headsteer/sampling.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <map>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace headsteer {

// ---------------------------------------------------------------- capture

CaptureResult capture_pair_activations(const Model& model, const Tokenizer& tokenizer, const PairCorpus& corpus,
                                       const CaptureOptions& options, unsigned jobs) {
    if (corpus.pairs.empty()) throw std::invalid_argument("corpus is empty");
    const auto sites = tap_sites(model.config);
    const std::size_t per_pair = 2 * sites.size();

    CaptureResult result;
    result.activations.resize(corpus.pairs.size() * per_pair);
    std::vector<char> truncated(corpus.pairs.size(), 0);

    parallel_for(corpus.pairs.size(), jobs, [&](std::size_t p) {
        const auto& pair = corpus.pairs[p];
        const Sample* sides[2] = {&pair.toxic, &pair.nontoxic};
        for (int s = 0; s < 2; ++s) {
            const Sample& sample = *sides[s];
            std::vector<std::int32_t> ids{tokenizer.bos_id()};
            std::size_t completion_start = 1;
            if (options.include_cue) {
                const auto cue = tokenizer.encode(sample.prompt);
                ids.insert(ids.end(), cue.begin(), cue.end());
                completion_start = ids.size();
            }
            const auto body = tokenizer.encode(sample.completion);
            ids.insert(ids.end(), body.begin(), body.end());
            if (ids.size() > model.config.max_seq_len) {
                const std::size_t drop = ids.size() - model.config.max_seq_len;
                ids.erase(ids.begin() + 1, ids.begin() + 1 + static_cast<std::ptrdiff_t>(drop));
                completion_start = completion_start > drop ? completion_start - drop : 1;
                truncated[p] = 1;
            }
            ForwardOptions opt;
            opt.capture = sites;
            const auto out = forward(model, ids, opt);
            const std::size_t n = ids.size();
            const std::size_t first = std::min(completion_start, n - 1);
            for (std::size_t k = 0; k < sites.size(); ++k) {
                const Matrix& cap = out.captured.at(sites[k]);
                std::vector<float> v(cap.cols, 0.0f);
                if (options.pooling == Pooling::last_token) {
                    auto row = cap.row(n - 1);
                    v.assign(row.begin(), row.end());
                } else {
                    for (std::size_t i = first; i < n; ++i)
                        for (std::size_t e = 0; e < cap.cols; ++e) v[e] += cap.at(i, e);
                    for (auto& x : v) x /= static_cast<float>(n - first);
                }
                auto& act = result.activations[p * per_pair + static_cast<std::size_t>(s) * sites.size() + k];
                act.site = sites[k];
                act.vector = std::move(v);
                act.label = s == 0 ? Label::toxic : Label::nontoxic;
                act.pair_id = pair.pair_id;
            }
        }
    });
    for (std::size_t p = 0; p < corpus.pairs.size(); ++p)
        if (truncated[p]) result.truncated.push_back(corpus.pairs[p].pair_id);
    return result;
}

// ---------------------------------------------------------------- detox vectors

const std::vector<float>& DetoxVectorSet::at(const ActivationSite& site) const {
    if (site.layer >= n_layers || site.head >= n_heads) throw std::out_of_range("site " + to_string(site));
    return vectors[static_cast<std::size_t>(site.layer) * n_heads + site.head];
}

std::vector<ActivationSite> DetoxVectorSet::sites() const {
    std::vector<ActivationSite> s;
    for (std::uint32_t l = 0; l < n_layers; ++l)
        for (std::uint32_t h = 0; h < n_heads; ++h) s.push_back({l, h});
    return s;
}

DetoxVectorSet compute_detox_vectors(const std::vector<SiteActivation>& activations,
                                     const std::vector<ActivationSite>& sites, std::uint32_t d_head) {
    if (sites.empty()) throw std::invalid_argument("no sites given");
    DetoxVectorSet out;
    for (const auto& s : sites) {
        out.n_layers = std::max(out.n_layers, s.layer + 1);
        out.n_heads = std::max(out.n_heads, s.head + 1);
    }
    if (static_cast<std::size_t>(out.n_layers) * out.n_heads != sites.size())
        throw std::invalid_argument("sites must cover a full L x H grid");
    out.d_head = d_head;

    // (pair_id, site) -> [toxic, nontoxic]
    std::map<std::pair<std::string, ActivationSite>, std::array<const std::vector<float>*, 2>> slots;
    std::set<std::string> pair_ids;
    for (const auto& a : activations) {
        if (a.vector.size() != d_head)
            throw std::invalid_argument("activation for pair " + a.pair_id + " at " + to_string(a.site) +
                                        " has length " + std::to_string(a.vector.size()));
        auto& slot = slots[{a.pair_id, a.site}];
        auto& ref = slot[a.label == Label::toxic ? 0 : 1];
        if (ref != nullptr)
            throw std::invalid_argument("duplicate activation for pair " + a.pair_id + " at " + to_string(a.site));
        ref = &a.vector;
        pair_ids.insert(a.pair_id);
    }
    if (pair_ids.empty()) throw std::invalid_argument("no activations given");

    out.vectors.reserve(sites.size());
    for (std::uint32_t l = 0; l < out.n_layers; ++l) {
        for (std::uint32_t h = 0; h < out.n_heads; ++h) {
            const ActivationSite site{l, h};
            std::vector<double> acc(d_head, 0.0);
            for (const auto& id : pair_ids) {
                auto it = slots.find({id, site});
                if (it == slots.end() || it->second[0] == nullptr || it->second[1] == nullptr) {
                    const char* missing = (it == slots.end() || it->second[0] == nullptr) ? "toxic" : "nontoxic";
                    throw std::invalid_argument("pair " + id + " lacks a " + missing + " activation at site " +
                                                to_string(site));
                }
                const auto& tox = *it->second[0];
                const auto& non = *it->second[1];
                for (std::size_t e = 0; e < d_head; ++e)
                    acc[e] += static_cast<double>(non[e]) - static_cast<double>(tox[e]);
            }
            std::vector<float> z(d_head);
            for (std::size_t e = 0; e < d_head; ++e) z[e] = static_cast<float>(acc[e] / static_cast<double>(pair_ids.size()));
            out.vectors.push_back(std::move(z));
        }
    }
    out.m_used = static_cast<std::uint32_t>(pair_ids.size());
    return out;
}

// ---------------------------------------------------------------- probes

double Probe::predict(std::span<const float> x) const {
    double s = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * x[i];
    return 1.0 / (1.0 + std::exp(-s));
}

Probe train_probe(const std::vector<LabeledVector>& data, std::uint64_t seed, const ProbeTrainConfig& config) {
    std::size_t n_pos = 0;
    for (const auto& d : data) n_pos += d.positive ? 1 : 0;
    const std::size_t n_neg = data.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("single-class data: probe needs both labels");
    if (n_pos < 2 || n_neg < 2) throw std::invalid_argument("probe needs at least 2 examples per class");
    const std::size_t dim = data.front().features.size();
    for (const auto& d : data)
        if (d.features.size() != dim) throw std::invalid_argument("probe features have inconsistent lengths");

    // group-level split
    std::vector<std::string> groups;
    {
        std::set<std::string> g;
        for (const auto& d : data) g.insert(d.group);
        groups.assign(g.begin(), g.end());
    }
    if (groups.size() < 2) throw std::invalid_argument("probe needs at least 2 groups to split");
    StreamRng rng(seed, 0x9e11);
    for (std::size_t i = groups.size() - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i + 1));
        std::swap(groups[i], groups[std::min(j, i)]);
    }
    auto n_train_groups = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(groups.size())));
    n_train_groups = std::clamp<std::size_t>(n_train_groups, 1, groups.size() - 1);
    const std::set<std::string> train_groups(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_train_groups));

    std::vector<const LabeledVector*> train, val;
    for (const auto& d : data) (train_groups.count(d.group) ? train : val).push_back(&d);

    std::vector<double> mean(dim, 0.0), scale(dim, 1.0);
    if (config.standardize) {
        for (const auto* d : train)
            for (std::size_t e = 0; e < dim; ++e) mean[e] += d->features[e];
        for (auto& m : mean) m /= static_cast<double>(train.size());
        std::vector<double> var(dim, 0.0);
        for (const auto* d : train)
            for (std::size_t e = 0; e < dim; ++e) var[e] += (d->features[e] - mean[e]) * (d->features[e] - mean[e]);
        for (std::size_t e = 0; e < dim; ++e) {
            const double sd = std::sqrt(var[e] / static_cast<double>(train.size()));
            scale[e] = sd > 1e-8 ? sd : 1.0;
        }
    }
    auto standardized = [&](const LabeledVector& d) {
        std::vector<double> x(dim);
        for (std::size_t e = 0; e < dim; ++e) x[e] = (d.features[e] - mean[e]) / scale[e];
        return x;
    };
    std::vector<std::vector<double>> xs;
    xs.reserve(train.size());
    for (const auto* d : train) xs.push_back(standardized(*d));

    std::vector<double> w(dim, 0.0), grad(dim);
    double b = 0.0;
    const double inv_n = 1.0 / static_cast<double>(train.size());
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            double s = b;
            for (std::size_t e = 0; e < dim; ++e) s += w[e] * xs[i][e];
            const double err = 1.0 / (1.0 + std::exp(-s)) - (train[i]->positive ? 1.0 : 0.0);
            for (std::size_t e = 0; e < dim; ++e) grad[e] += err * xs[i][e];
            grad_b += err;
        }
        for (std::size_t e = 0; e < dim; ++e) w[e] -= config.learning_rate * (grad[e] * inv_n + config.l2 * w[e]);
        if (config.use_bias) b -= config.learning_rate * grad_b * inv_n;
    }

    std::size_t correct = 0;
    for (const auto* d : val) {
        const auto x = standardized(*d);
        double s = b;
        for (std::size_t e = 0; e < dim; ++e) s += w[e] * x[e];
        const bool predicted = 1.0 / (1.0 + std::exp(-s)) > 0.5;
        correct += predicted == d->positive ? 1 : 0;
    }

    Probe probe;
    probe.weights.resize(dim);
    double folded_bias = b;
    for (std::size_t e = 0; e < dim; ++e) {
        probe.weights[e] = static_cast<float>(w[e] / scale[e]);
        folded_bias -= w[e] * mean[e] / scale[e];
    }
    probe.bias = static_cast<float>(folded_bias);
    probe.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
    probe.n_train = static_cast<std::uint32_t>(train.size());
    probe.n_val = static_cast<std::uint32_t>(val.size());
    return probe;
}

const Probe& ProbeSet::at(const ActivationSite& site) const {
    if (site.layer >= n_layers || site.head >= n_heads) throw std::out_of_range("site " + to_string(site));
    return probes[static_cast<std::size_t>(site.layer) * n_heads + site.head];
}

ProbeSet train_probes(const std::vector<SiteActivation>& activations, const ModelConfig& config, std::uint64_t seed,
                      const ProbeTrainConfig& train, unsigned jobs) {
    const auto sites = tap_sites(config);
    std::vector<std::vector<LabeledVector>> per_site(sites.size());
    std::set<std::string> pair_ids;
    for (const auto& a : activations) {
        const std::size_t idx = static_cast<std::size_t>(a.site.layer) * config.n_heads + a.site.head;
        if (idx >= sites.size()) throw std::invalid_argument("activation site " + to_string(a.site) + " out of range");
        per_site[idx].push_back({a.vector, a.label == Label::nontoxic, a.pair_id});
        pair_ids.insert(a.pair_id);
    }
    ProbeSet set;
    set.n_layers = config.n_layers;
    set.n_heads = config.n_heads;
    set.d_head = config.d_head;
    set.m_used = static_cast<std::uint32_t>(pair_ids.size());
    set.probes.resize(sites.size());
    parallel_for(sites.size(), jobs, [&](std::size_t i) { set.probes[i] = train_probe(per_site[i], seed, train); });
    return set;
}

HeadPolicy head_policy_from_string(std::string_view s) {
    if (s == "all") return HeadPolicy::all;
    if (s == "uniform") return HeadPolicy::uniform;
    if (s == "top-half" || s == "top_half") return HeadPolicy::top_half;
    if (s == "bottom-half" || s == "bottom_half") return HeadPolicy::bottom_half;
    throw std::invalid_argument("unknown head policy '" + std::string(s) + "'");
}

const char* to_string(HeadPolicy p) {
    switch (p) {
        case HeadPolicy::all: return "all";
        case HeadPolicy::uniform: return "uniform";
        case HeadPolicy::top_half: return "top-half";
        case HeadPolicy::bottom_half: return "bottom-half";
    }
    return "unknown";
}

std::vector<double> build_fusion_weights(const ProbeSet& probes, HeadPolicy policy) {
    const std::size_t n = probes.probes.size();
    std::vector<double> weights(n, 0.0);
    if (policy == HeadPolicy::uniform) {
        std::fill(weights.begin(), weights.end(), 1.0);
        return weights;
    }
    if (policy == HeadPolicy::all) {
        for (std::size_t i = 0; i < n; ++i) weights[i] = probes.probes[i].accuracy;
        return weights;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return probes.probes[a].accuracy > probes.probes[b].accuracy;
    });
    const std::size_t top = (n + 1) / 2;
    const bool keep_top = policy == HeadPolicy::top_half;
    for (std::size_t r = 0; r < n; ++r)
        if ((r < top) == keep_top) weights[order[r]] = probes.probes[order[r]].accuracy;
    return weights;
}

std::vector<std::vector<double>> heatmap_data(const ProbeSet& probes) {
    std::vector<std::vector<double>> m(probes.n_layers, std::vector<double>(probes.n_heads, 0.0));
    for (std::uint32_t l = 0; l < probes.n_layers; ++l)
        for (std::uint32_t h = 0; h < probes.n_heads; ++h) m[l][h] = probes.at({l, h}).accuracy;
    return m;
}

// ---------------------------------------------------------------- PCA

PcaResult pca_project(const std::vector<std::vector<float>>& data, std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be >= 1");
    if (data.size() < k) throw std::invalid_argument("PCA needs at least k examples");
    const std::size_t n = data.size();
    const std::size_t dim = data.front().size();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n; ++i) {
        if (data[i].size() != dim) throw std::invalid_argument("PCA rows have inconsistent lengths");
        for (std::size_t j = 0; j < dim; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i][j];
    }
    const Eigen::VectorXd mu = x.colwise().mean();
    x.rowwise() -= mu.transpose();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<std::size_t>(n - 1, 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const auto& evals = solver.eigenvalues();  // ascending
    const auto& evecs = solver.eigenvectors();

    PcaResult r;
    const std::size_t avail = std::min(k, dim);
    const double top = std::max(evals(static_cast<Eigen::Index>(dim) - 1), 0.0);
    r.mean.assign(mu.data(), mu.data() + dim);
    for (std::size_t c = 0; c < avail; ++c) {
        const auto col = static_cast<Eigen::Index>(dim - 1 - c);
        Eigen::VectorXd v = evecs.col(col);
        // sign convention: largest-magnitude entry positive
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        r.components.emplace_back(v.data(), v.data() + dim);
        const double ev = std::max(evals(col), 0.0);
        r.explained_variance.push_back(ev);
        if (ev <= 1e-12 * std::max(top, 1e-300)) r.degenerate = true;
    }
    if (avail < k) r.degenerate = true;
    r.coords.assign(n, std::vector<double>(avail, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < avail; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * r.components[c][j];
            r.coords[i][c] = s;
        }
    return r;
}

// ---------------------------------------------------------------- artifacts

namespace {

constexpr std::uint32_t kArtifactVersion = 1;

void write_header(binio::Writer& w, const char* magic, std::uint32_t l, std::uint32_t h, std::uint32_t dh,
                  std::uint32_t m, std::uint64_t hash) {
    w.bytes(magic, 4);
    w.u32(kArtifactVersion);
    w.u32(l);
    w.u32(h);
    w.u32(dh);
    w.u32(m);
    w.u64(hash);
}

struct Header {
    std::uint32_t l, h, dh, m;
    std::uint64_t hash;
};

Header read_header(binio::Reader& r, const char* magic) {
    if (r.str(4) != std::string(magic, 4)) throw std::runtime_error(r.path() + ": bad magic, expected " + magic);
    const auto version = r.u32();
    if (version != kArtifactVersion) throw std::runtime_error(r.path() + ": unsupported version " + std::to_string(version));
    Header hd{};
    hd.l = r.u32();
    hd.h = r.u32();
    hd.dh = r.u32();
    hd.m = r.u32();
    hd.hash = r.u64();
    if (hd.l == 0 || hd.h == 0 || hd.dh == 0) throw std::runtime_error(r.path() + ": zero dimension in header");
    return hd;
}

}  // namespace

void save_vectors(const std::filesystem::path& path, const DetoxVectorSet& v) {
    binio::Writer w;
    write_header(w, "STVZ", v.n_layers, v.n_heads, v.d_head, v.m_used, v.corpus_hash);
    for (const auto& z : v.vectors)
        for (float f : z) w.f32(f);
    w.save(path.string());
}

DetoxVectorSet load_vectors(const std::filesystem::path& path) {
    binio::Reader r(path.string());
    const auto hd = read_header(r, "STVZ");
    DetoxVectorSet v{hd.l, hd.h, hd.dh, hd.m, hd.hash, {}};
    v.vectors.assign(static_cast<std::size_t>(hd.l) * hd.h, std::vector<float>(hd.dh));
    for (auto& z : v.vectors)
        for (auto& f : z) {
            f = r.f32();
            if (!std::isfinite(f)) throw std::runtime_error(path.string() + ": non-finite vector entry");
        }
    if (!r.done()) throw std::runtime_error(path.string() + ": trailing bytes");
    return v;
}

void save_probes(const std::filesystem::path& path, const ProbeSet& p) {
    binio::Writer w;
    write_header(w, "STVP", p.n_layers, p.n_heads, p.d_head, p.m_used, p.corpus_hash);
    for (const auto& probe : p.probes) {
        for (float f : probe.weights) w.f32(f);
        w.f32(probe.bias);
        w.f64(probe.accuracy);
        w.u32(probe.n_train);
        w.u32(probe.n_val);
    }
    w.save(path.string());
}

ProbeSet load_probes(const std::filesystem::path& path) {
    binio::Reader r(path.string());
    const auto hd = read_header(r, "STVP");
    ProbeSet p{hd.l, hd.h, hd.dh, hd.m, hd.hash, {}};
    p.probes.resize(static_cast<std::size_t>(hd.l) * hd.h);
    for (auto& probe : p.probes) {
        probe.weights.resize(hd.dh);
        for (auto& f : probe.weights) f = r.f32();
        probe.bias = r.f32();
        probe.accuracy = r.f64();
        probe.n_train = r.u32();
        probe.n_val = r.u32();
        if (!(probe.accuracy >= 0.0 && probe.accuracy <= 1.0))
            throw std::runtime_error(path.string() + ": probe accuracy outside [0,1]");
    }
    if (!r.done()) throw std::runtime_error(path.string() + ": trailing bytes");
    return p;
}

void write_heatmap_csv(const std::filesystem::path& path, const ProbeSet& probes) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,head,accuracy\n";
    const auto m = heatmap_data(probes);
    for (std::size_t l = 0; l < m.size(); ++l)
        for (std::size_t h = 0; h < m[l].size(); ++h) out << l << ',' << h << ',' << fmt_double(m[l][h]) << '\n';
}

void write_pca_csv(const std::filesystem::path& path, const PcaResult& pca, const std::vector<Label>& labels) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "index,label";
    const std::size_t k = pca.coords.empty() ? 0 : pca.coords.front().size();
    for (std::size_t c = 0; c < k; ++c) out << ",pc" << (c + 1);
    out << '\n';
    for (std::size_t i = 0; i < pca.coords.size(); ++i) {
        out << i << ',' << (i < labels.size() && labels[i] == Label::nontoxic ? "nontoxic" : "toxic");
        for (double v : pca.coords[i]) out << ',' << fmt_double(v);
        out << '\n';
    }
}

void check_compatible(const ModelConfig& config, std::uint32_t n_layers, std::uint32_t n_heads, std::uint32_t d_head,
                      const std::string& what) {
    if (config.n_layers == n_layers && config.n_heads == n_heads && config.d_head == d_head) return;
    throw std::invalid_argument(what + " is incompatible with the model: artifact (L=" + std::to_string(n_layers) +
                                ", H=" + std::to_string(n_heads) + ", D_h=" + std::to_string(d_head) +
                                ") vs model (L=" + std::to_string(config.n_layers) + ", H=" +
                                std::to_string(config.n_heads) + ", D_h=" + std::to_string(config.d_head) + ")");
}

}  // namespace headsteer
