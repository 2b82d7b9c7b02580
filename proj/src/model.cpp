#include "headsteer/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

namespace headsteer {

namespace {

constexpr char kWeightMagic[4] = {'S', 'T', 'V', 'W'};
constexpr std::uint32_t kWeightVersion = 1;
constexpr float kLayerNormEps = 1e-5f;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ModelError(msg);
}

void layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                std::span<float> out) {
    const std::size_t n = x.size();
    float mean = 0.0f;
    for (float v : x) mean += v;
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

// out = W x + b
void matvec(const Matrix& w, std::span<const float> x, std::span<const float> b, std::span<float> out) {
    for (std::size_t r = 0; r < w.rows; ++r) {
        const float* row = w.data.data() + r * w.cols;
        float acc = 0.0f;
        for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
        out[r] = acc + (b.empty() ? 0.0f : b[r]);
    }
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

// ---------------------------------------------------------------- serialization

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_tensor(std::ofstream& out, const std::string& name, std::vector<std::uint32_t> dims,
                  std::span<const float> payload) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) write_u32(out, d);
    for (float f : payload) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, &f, 4);
        write_u32(out, bits);
    }
}

class ByteReader {
  public:
    explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    bool done() const { return pos_ >= bytes_.size(); }

    std::uint32_t u32(const char* what) {
        require(pos_ + 4 <= bytes_.size(), std::string("truncated weight file while reading ") + what);
        std::uint32_t v = static_cast<std::uint32_t>(bytes_[pos_]) |
                          (static_cast<std::uint32_t>(bytes_[pos_ + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes_[pos_ + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes_[pos_ + 3]) << 24);
        pos_ += 4;
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        require(pos_ + n <= bytes_.size(), std::string("truncated weight file while reading ") + what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

  private:
    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
};

struct RawTensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

struct TensorSink {
    std::map<std::string, RawTensor> tensors;
    std::set<std::string> consumed;

    const RawTensor& take(const std::string& name, std::vector<std::uint32_t> dims) {
        auto it = tensors.find(name);
        require(it != tensors.end(), "missing tensor '" + name + "'");
        if (it->second.dims != dims) {
            std::string want, got;
            for (auto d : dims) want += std::to_string(d) + " ";
            for (auto d : it->second.dims) got += std::to_string(d) + " ";
            throw ModelError("dimension mismatch for tensor '" + name + "': expected [ " + want +
                             "] got [ " + got + "]");
        }
        consumed.insert(name);
        return it->second;
    }

    std::vector<float> vec(const std::string& name, std::uint32_t n) { return take(name, {n}).values; }

    Matrix mat(const std::string& name, std::uint32_t r, std::uint32_t c) {
        Matrix m;
        m.rows = r;
        m.cols = c;
        m.data = take(name, {r, c}).values;
        return m;
    }
};

std::string layer_name(std::size_t l, const char* suffix) {
    return "h." + std::to_string(l) + "." + suffix;
}

template <typename Fn>
void for_each_tensor(const Model& m, Fn&& fn) {
    const auto& c = m.config;
    fn("wte", std::vector<std::uint32_t>{c.vocab_size, c.d_model}, m.token_embedding.data);
    fn("wpe", std::vector<std::uint32_t>{c.max_seq_len, c.d_model}, m.position_embedding.data);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& w = m.layers[l];
        const std::vector<std::uint32_t> dd{c.d_model, c.d_model};
        const std::vector<std::uint32_t> d1{c.d_model};
        fn(layer_name(l, "ln_1.g"), d1, w.ln1_gain);
        fn(layer_name(l, "ln_1.b"), d1, w.ln1_bias);
        fn(layer_name(l, "attn.q.w"), dd, w.wq.data);
        fn(layer_name(l, "attn.q.b"), d1, w.bq);
        fn(layer_name(l, "attn.k.w"), dd, w.wk.data);
        fn(layer_name(l, "attn.k.b"), d1, w.bk);
        fn(layer_name(l, "attn.v.w"), dd, w.wv.data);
        fn(layer_name(l, "attn.v.b"), d1, w.bv);
        fn(layer_name(l, "attn.o.w"), dd, w.wo.data);
        fn(layer_name(l, "attn.o.b"), d1, w.bo);
        fn(layer_name(l, "ln_2.g"), d1, w.ln2_gain);
        fn(layer_name(l, "ln_2.b"), d1, w.ln2_bias);
        fn(layer_name(l, "mlp.fc.w"), std::vector<std::uint32_t>{m.d_ff, c.d_model}, w.fc.data);
        fn(layer_name(l, "mlp.fc.b"), std::vector<std::uint32_t>{m.d_ff}, w.fc_bias);
        fn(layer_name(l, "mlp.proj.w"), std::vector<std::uint32_t>{c.d_model, m.d_ff}, w.proj.data);
        fn(layer_name(l, "mlp.proj.b"), d1, w.proj_bias);
    }
    fn("ln_f.g", std::vector<std::uint32_t>{c.d_model}, m.lnf_gain);
    fn("ln_f.b", std::vector<std::uint32_t>{c.d_model}, m.lnf_bias);
    fn("lm_head.w", std::vector<std::uint32_t>{c.vocab_size, c.d_model}, m.unembedding.data);
}

}  // namespace

void ModelConfig::validate() const {
    require(n_layers >= 1, "n_layers must be >= 1");
    require(n_heads >= 1, "n_heads must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(d_head >= 1, "d_head must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(max_seq_len >= 1, "max_seq_len must be >= 1");
    require(d_model % n_heads == 0, "d_model not divisible by n_heads");
    require(d_model == n_heads * d_head, "d_model must equal n_heads * d_head");
    require(norm == NormPlacement::pre_ln, "unsupported norm placement");
}

std::string to_string(const ActivationSite& site) {
    return "(" + std::to_string(site.layer) + "," + std::to_string(site.head) + ")";
}

Model Model::zeros(const ModelConfig& config, std::uint32_t d_ff) {
    config.validate();
    require(d_ff >= 1, "d_ff must be >= 1");
    Model m;
    m.config = config;
    m.d_ff = d_ff;
    const auto d = config.d_model;
    m.token_embedding = Matrix(config.vocab_size, d);
    m.position_embedding = Matrix(config.max_seq_len, d);
    m.layers.resize(config.n_layers);
    for (auto& w : m.layers) {
        w.ln1_gain.assign(d, 1.0f);
        w.ln1_bias.assign(d, 0.0f);
        w.wq = Matrix(d, d);
        w.wk = Matrix(d, d);
        w.wv = Matrix(d, d);
        w.wo = Matrix(d, d);
        w.bq.assign(d, 0.0f);
        w.bk.assign(d, 0.0f);
        w.bv.assign(d, 0.0f);
        w.bo.assign(d, 0.0f);
        w.ln2_gain.assign(d, 1.0f);
        w.ln2_bias.assign(d, 0.0f);
        w.fc = Matrix(d_ff, d);
        w.fc_bias.assign(d_ff, 0.0f);
        w.proj = Matrix(d, d_ff);
        w.proj_bias.assign(d, 0.0f);
    }
    m.lnf_gain.assign(d, 1.0f);
    m.lnf_bias.assign(d, 0.0f);
    m.unembedding = Matrix(config.vocab_size, d);
    return m;
}

Model Model::random(const ModelConfig& config, std::uint32_t d_ff, std::uint64_t seed, float scale) {
    Model m = zeros(config, d_ff);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, scale);
    auto fill = [&](std::vector<float>& v) {
        for (auto& x : v) x = normal(rng);
    };
    fill(m.token_embedding.data);
    fill(m.position_embedding.data);
    for (auto& w : m.layers) {
        for (auto* v : {&w.wq.data, &w.wk.data, &w.wv.data, &w.wo.data, &w.bq, &w.bk, &w.bv, &w.bo,
                        &w.fc.data, &w.fc_bias, &w.proj.data, &w.proj_bias, &w.ln1_bias, &w.ln2_bias})
            fill(*v);
        for (auto& g : w.ln1_gain) g = 1.0f + normal(rng);
        for (auto& g : w.ln2_gain) g = 1.0f + normal(rng);
    }
    fill(m.lnf_bias);
    fill(m.unembedding.data);
    return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot open for writing: " + path.string());
    out.write(kWeightMagic, 4);
    write_u32(out, kWeightVersion);
    const auto& c = model.config;
    for (auto v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.vocab_size, c.max_seq_len,
                   static_cast<std::uint32_t>(c.norm)})
        write_u32(out, v);
    for_each_tensor(model, [&](const std::string& name, const std::vector<std::uint32_t>& dims,
                               const std::vector<float>& payload) { write_tensor(out, name, dims, payload); });
    if (!out) throw ModelError("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open weight file: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader rd(std::move(bytes));

    require(rd.str(4, "magic") == std::string(kWeightMagic, 4), "malformed header: bad magic");
    const auto version = rd.u32("version");
    require(version == kWeightVersion, "malformed header: unsupported version " + std::to_string(version));
    ModelConfig c;
    c.n_layers = rd.u32("n_layers");
    c.n_heads = rd.u32("n_heads");
    c.d_model = rd.u32("d_model");
    c.d_head = rd.u32("d_head");
    c.vocab_size = rd.u32("vocab_size");
    c.max_seq_len = rd.u32("max_seq_len");
    c.norm = static_cast<NormPlacement>(rd.u32("norm_placement"));
    c.validate();

    TensorSink sink;
    while (!rd.done()) {
        const auto name_len = rd.u32("tensor name length");
        require(name_len > 0 && name_len < 4096, "malformed tensor name length");
        std::string name = rd.str(name_len, "tensor name");
        const auto rank = rd.u32("tensor rank");
        require(rank >= 1 && rank <= 4, "tensor '" + name + "' has unsupported rank");
        RawTensor t;
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            t.dims.push_back(rd.u32("tensor dims"));
            count *= t.dims.back();
        }
        t.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = rd.u32(name.c_str());
            std::memcpy(&t.values[i], &bits, 4);
            require(std::isfinite(t.values[i]), "non-finite weight in tensor '" + name + "'");
        }
        require(sink.tensors.emplace(name, std::move(t)).second, "duplicate tensor '" + name + "'");
    }

    auto fc0 = sink.tensors.find("h.0.mlp.fc.w");
    require(fc0 != sink.tensors.end(), "missing tensor 'h.0.mlp.fc.w'");
    require(fc0->second.dims.size() == 2, "tensor 'h.0.mlp.fc.w' must be rank 2");

    Model m;
    m.config = c;
    m.d_ff = fc0->second.dims[0];
    const auto d = c.d_model;
    m.token_embedding = sink.mat("wte", c.vocab_size, d);
    m.position_embedding = sink.mat("wpe", c.max_seq_len, d);
    m.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        auto& w = m.layers[l];
        w.ln1_gain = sink.vec(layer_name(l, "ln_1.g"), d);
        w.ln1_bias = sink.vec(layer_name(l, "ln_1.b"), d);
        w.wq = sink.mat(layer_name(l, "attn.q.w"), d, d);
        w.bq = sink.vec(layer_name(l, "attn.q.b"), d);
        w.wk = sink.mat(layer_name(l, "attn.k.w"), d, d);
        w.bk = sink.vec(layer_name(l, "attn.k.b"), d);
        w.wv = sink.mat(layer_name(l, "attn.v.w"), d, d);
        w.bv = sink.vec(layer_name(l, "attn.v.b"), d);
        w.wo = sink.mat(layer_name(l, "attn.o.w"), d, d);
        w.bo = sink.vec(layer_name(l, "attn.o.b"), d);
        w.ln2_gain = sink.vec(layer_name(l, "ln_2.g"), d);
        w.ln2_bias = sink.vec(layer_name(l, "ln_2.b"), d);
        w.fc = sink.mat(layer_name(l, "mlp.fc.w"), m.d_ff, d);
        w.fc_bias = sink.vec(layer_name(l, "mlp.fc.b"), m.d_ff);
        w.proj = sink.mat(layer_name(l, "mlp.proj.w"), d, m.d_ff);
        w.proj_bias = sink.vec(layer_name(l, "mlp.proj.b"), d);
    }
    m.lnf_gain = sink.vec("ln_f.g", d);
    m.lnf_bias = sink.vec("ln_f.b", d);
    m.unembedding = sink.mat("lm_head.w", c.vocab_size, d);
    for (const auto& [name, _] : sink.tensors)
        require(sink.consumed.count(name) == 1, "unexpected tensor '" + name + "'");
    return m;
}

std::vector<ActivationSite> tap_sites(const ModelConfig& config) {
    std::vector<ActivationSite> sites;
    sites.reserve(static_cast<std::size_t>(config.n_layers) * config.n_heads);
    for (std::uint32_t l = 0; l < config.n_layers; ++l)
        for (std::uint32_t h = 0; h < config.n_heads; ++h) sites.push_back({l, h});
    return sites;
}

DecoderCache::DecoderCache(const ModelConfig& config)
    : n_layers_(config.n_layers),
      d_model_(config.d_model),
      capacity_(config.max_seq_len),
      keys_(static_cast<std::size_t>(config.n_layers) * config.max_seq_len * config.d_model),
      values_(keys_.size()) {}

// ---------------------------------------------------------------- forward

class ForwardPass {
  public:
    static ForwardOutput run(const Model& model, std::span<const std::int32_t> tokens,
                             const ForwardOptions& opt);
};

ForwardOutput ForwardPass::run(const Model& model, std::span<const std::int32_t> tokens,
                               const ForwardOptions& opt) {
    const auto& c = model.config;
    const std::size_t n = tokens.size();
    const std::size_t d = c.d_model;
    const std::size_t dh = c.d_head;
    if (n == 0) throw ModelError("forward called with an empty token sequence");
    for (auto t : tokens)
        if (t < 0 || static_cast<std::uint32_t>(t) >= c.vocab_size)
            throw ModelError("token " + std::to_string(t) + " out of vocabulary range");

    DecoderCache local;
    DecoderCache* cache = opt.cache;
    if (cache == nullptr) {
        local = DecoderCache(c);
        cache = &local;
    } else if (cache->n_layers_ != c.n_layers || cache->d_model_ != c.d_model ||
               cache->capacity_ != c.max_seq_len) {
        throw ModelError("decoder cache does not match model configuration");
    }
    const std::size_t start = cache->length_;
    if (start + n > c.max_seq_len)
        throw ModelError("sequence length " + std::to_string(start + n) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));

    if (opt.interventions != nullptr) {
        for (const auto& [site, edit] : *opt.interventions) {
            if (site.layer >= c.n_layers || site.head >= c.n_heads)
                throw ModelError("intervention site " + to_string(site) + " out of range");
            if (edit.vector.size() != dh)
                throw ModelError("intervention vector at " + to_string(site) + " has wrong length");
        }
    }
    for (const auto& site : opt.capture)
        if (site.layer >= c.n_layers || site.head >= c.n_heads)
            throw ModelError("capture site " + to_string(site) + " out of range");

    ForwardOutput out;
    for (const auto& site : opt.capture) out.captured[site] = Matrix(n, dh);

    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto te = model.token_embedding.row(static_cast<std::size_t>(tokens[i]));
        auto pe = model.position_embedding.row(start + i);
        for (std::size_t j = 0; j < d; ++j) x.at(i, j) = te[j] + pe[j];
    }
    if (opt.capture_residual) out.residual.push_back(x);

    std::vector<float> u(d), q(d), heads(d), attn(d), ff(model.d_ff), mlp(d), scores(c.max_seq_len);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& w = model.layers[l];
        float* kbase = cache->keys_.data() + l * c.max_seq_len * d;
        float* vbase = cache->values_.data() + l * c.max_seq_len * d;

        // keys/values for all new positions first so causal attention sees them
        Matrix qs(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            layer_norm(x.row(i), w.ln1_gain, w.ln1_bias, u);
            matvec(w.wq, u, w.bq, qs.row(i));
            matvec(w.wk, u, w.bk, std::span<float>(kbase + (start + i) * d, d));
            matvec(w.wv, u, w.bv, std::span<float>(vbase + (start + i) * d, d));
        }

        Matrix a_out;
        if (opt.capture_residual) a_out = Matrix(n, d);

        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t pos = start + i;
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const float* qh = qs.row(i).data() + h * dh;
                float mx = -INFINITY;
                for (std::size_t j = 0; j <= pos; ++j) {
                    const float* kh = kbase + j * d + h * dh;
                    float s = 0.0f;
                    for (std::size_t e = 0; e < dh; ++e) s += qh[e] * kh[e];
                    scores[j] = s * scale;
                    mx = std::max(mx, scores[j]);
                }
                float total = 0.0f;
                for (std::size_t j = 0; j <= pos; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    total += scores[j];
                }
                float* hout = heads.data() + h * dh;
                std::fill(hout, hout + dh, 0.0f);
                for (std::size_t j = 0; j <= pos; ++j) {
                    const float p = scores[j] / total;
                    const float* vh = vbase + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) hout[e] += p * vh[e];
                }
                const ActivationSite site{static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)};
                if (opt.interventions != nullptr) {
                    auto it = opt.interventions->find(site);
                    if (it != opt.interventions->end()) {
                        const float coef = it->second.coefficient;
                        const auto& vec = it->second.vector;
                        for (std::size_t e = 0; e < dh; ++e) hout[e] += coef * vec[e];
                    }
                }
                if (!opt.capture.empty()) {
                    auto cap = out.captured.find(site);
                    if (cap != out.captured.end()) std::copy(hout, hout + dh, cap->second.row(i).begin());
                }
            }
            matvec(w.wo, heads, w.bo, attn);
            if (opt.capture_residual) std::copy(attn.begin(), attn.end(), a_out.row(i).begin());
            auto xi = x.row(i);
            for (std::size_t j = 0; j < d; ++j) xi[j] += attn[j];
            layer_norm(xi, w.ln2_gain, w.ln2_bias, u);
            matvec(w.fc, u, w.fc_bias, ff);
            for (auto& f : ff) f = gelu(f);
            matvec(w.proj, ff, w.proj_bias, mlp);
            for (std::size_t j = 0; j < d; ++j) xi[j] += mlp[j];
        }
        if (opt.capture_residual) {
            out.attention.push_back(std::move(a_out));
            out.residual.push_back(x);
        }
    }
    cache->length_ = start + n;

    const std::size_t first = opt.last_logits_only ? n - 1 : 0;
    out.logits = Matrix(n - first, c.vocab_size);
    for (std::size_t i = first; i < n; ++i) {
        layer_norm(x.row(i), model.lnf_gain, model.lnf_bias, u);
        matvec(model.unembedding, u, {}, out.logits.row(i - first));
    }
    return out;
}

ForwardOutput forward(const Model& model, std::span<const std::int32_t> tokens, const ForwardOptions& options) {
    return ForwardPass::run(model, tokens, options);
}

void log_softmax_inplace(std::span<float> logits) {
    float mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, v);
    double total = 0.0;
    for (float v : logits) total += std::exp(static_cast<double>(v - mx));
    const float lse = mx + static_cast<float>(std::log(total));
    for (auto& v : logits) v -= lse;
}

LogProbSum score_tokens(const Model& model, std::span<const std::int32_t> tokens, std::size_t first_scored) {
    LogProbSum result;
    if (tokens.size() < 2 || first_scored >= tokens.size()) return result;
    first_scored = std::max<std::size_t>(first_scored, 1);
    auto out = forward(model, tokens.first(tokens.size() - 1));
    for (std::size_t i = first_scored; i < tokens.size(); ++i) {
        const auto row = out.logits.row(i - 1);
        double mx = -INFINITY;
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double total = 0.0;
        for (float v : row) total += std::exp(static_cast<double>(v) - mx);
        result.sum += static_cast<double>(row[static_cast<std::size_t>(tokens[i])]) - mx - std::log(total);
        ++result.count;
    }
    return result;
}

}  // namespace headsteer
