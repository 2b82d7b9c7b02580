#include "headsteer/scoring.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace headsteer {

const char* to_string(ScoreSource s) {
    switch (s) {
        case ScoreSource::remote: return "remote";
        case ScoreSource::local_lexicon: return "local-lexicon";
        case ScoreSource::local_probe: return "local-probe";
    }
    return "unknown";
}

ScoreSource score_source_from_string(std::string_view s) {
    if (s == "remote") return ScoreSource::remote;
    if (s == "local-lexicon") return ScoreSource::local_lexicon;
    if (s == "local-probe") return ScoreSource::local_probe;
    throw std::invalid_argument("unknown score source '" + std::string(s) + "'");
}

namespace {

std::string normalize_token(std::string_view raw) {
    std::string out;
    for (char c : raw) {
        const auto uc = static_cast<unsigned char>(c);
        if (uc < 0x80 && std::ispunct(uc)) continue;
        out.push_back(static_cast<char>(uc < 0x80 ? std::tolower(uc) : uc));
    }
    return out;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

bool starts_with_vowel_sound(std::string_view word) {
    for (char c : word) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            const char l = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            return l == 'a' || l == 'e' || l == 'i' || l == 'o' || l == 'u';
        }
    }
    return false;
}

}  // namespace

std::vector<std::string> lexicon_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            auto tok = normalize_token(text.substr(i, j - i));
            if (!tok.empty()) out.push_back(std::move(tok));
        }
        i = j;
    }
    return out;
}

Lexicon Lexicon::parse(std::string_view text) {
    std::set<std::string> terms;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto term = normalize_token(trim(line));
        if (!term.empty()) terms.insert(std::move(term));
    }
    return Lexicon(std::move(terms));
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open lexicon: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

bool Lexicon::contains(std::string_view normalized_token) const {
    return terms_.find(std::string(normalized_token)) != terms_.end();
}

double lexicon_score(const Lexicon& lexicon, std::string_view text) {
    const auto tokens = lexicon_tokens(text);
    if (tokens.empty()) return 0.0;
    std::size_t matched = 0;
    for (const auto& t : tokens)
        if (lexicon.contains(t)) ++matched;
    return static_cast<double>(matched) / static_cast<double>(tokens.size());
}

std::map<std::string, std::string> parse_substitutions(std::string_view text) {
    std::map<std::string, std::string> table;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::size_t sep = line.find('\t');
        std::size_t sep_len = 1;
        if (sep == std::string::npos) {
            sep = line.find("=>");
            sep_len = 2;
        }
        if (sep == std::string::npos) continue;
        auto key = normalize_token(trim(line.substr(0, sep)));
        auto value = trim(line.substr(sep + sep_len));
        if (!key.empty()) table[key] = value;
    }
    return table;
}

std::string render_rephrase_prompt(std::string_view input_text) {
    std::string out(kRephraseTemplate);
    const std::string slot = "{input_text}";
    out.replace(out.find(slot), slot.size(), input_text);
    return out;
}

void RemoteEndpoint::validate() const {
    if (url.empty()) throw std::invalid_argument("remote mode requires an endpoint URL");
    if (api_key_env.empty()) throw std::invalid_argument("remote mode requires an API key variable");
    if (!(rate_limit_per_second > 0.0)) throw std::invalid_argument("rate limit must be > 0");
    if (max_attempts < 1) throw std::invalid_argument("max attempts must be >= 1");
}

// ---------------------------------------------------------------- rate limiting / transport

RateLimiter::RateLimiter(double per_second)
    : interval_(std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          std::chrono::duration<double>(1.0 / per_second))) {
    if (!(per_second > 0.0)) throw std::invalid_argument("rate limit must be > 0");
}

void RateLimiter::acquire() {
    std::unique_lock lock(mutex_);
    const auto now = std::chrono::steady_clock::now();
    if (next_ > now) std::this_thread::sleep_until(next_);
    next_ = std::max(now, next_) + interval_;
}

namespace {

class HttpTransport final : public Transport {
  public:
    HttpReply post_json(const RemoteEndpoint& endpoint, const std::string& body,
                        const std::string& api_key) override {
        // split scheme://host[:port] from the path
        const auto scheme_end = endpoint.url.find("://");
        if (scheme_end == std::string::npos) return {0, {}, "endpoint URL lacks a scheme"};
        const auto path_start = endpoint.url.find('/', scheme_end + 3);
        const std::string base = endpoint.url.substr(0, path_start);
        const std::string path = path_start == std::string::npos ? "/" : endpoint.url.substr(path_start);

        httplib::Client client(base);
        const auto secs = endpoint.timeout.count() / 1000;
        const auto usecs = (endpoint.timeout.count() % 1000) * 1000;
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        httplib::Headers headers;
        if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) return {0, {}, httplib::to_string(res.error())};
        return {res->status, res->body, {}};
    }
};

}  // namespace

std::unique_ptr<Transport> make_http_transport() { return std::make_unique<HttpTransport>(); }

RemoteJsonClient::RemoteJsonClient(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport)
    : endpoint_(std::move(endpoint)),
      transport_(transport ? std::move(transport) : std::shared_ptr<Transport>(make_http_transport())),
      limiter_(endpoint_.rate_limit_per_second) {
    endpoint_.validate();
    const char* key = std::getenv(endpoint_.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
        throw std::invalid_argument("environment variable " + endpoint_.api_key_env + " is not set");
    api_key_ = key;
}

std::string RemoteJsonClient::post_with_retry(const std::string& text) {
    nlohmann::json body;
    body[endpoint_.request_field] = text;
    const std::string payload = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    std::string last_error;
    auto delay = endpoint_.backoff_base;
    for (int attempt = 1; attempt <= endpoint_.max_attempts; ++attempt) {
        limiter_.acquire();
        const auto reply = transport_->post_json(endpoint_, payload, api_key_);
        if (reply.transport_error.empty() && reply.status >= 200 && reply.status < 300) return reply.body;
        last_error = reply.transport_error.empty() ? "HTTP " + std::to_string(reply.status)
                                                   : reply.transport_error;
        if (attempt < endpoint_.max_attempts) {
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
    throw RemoteClientError(endpoint_.url + ": " + last_error + " after " +
                            std::to_string(endpoint_.max_attempts) + " attempts");
}

namespace {

nlohmann::json extract(const std::string& body, const std::string& pointer) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body);
        return doc.at(nlohmann::json::json_pointer(pointer));
    } catch (const nlohmann::json::exception& e) {
        throw RemoteClientError("malformed response (" + pointer + "): " + e.what());
    }
}

}  // namespace

std::string RemoteJsonClient::call(const std::string& text) {
    const auto value = extract(post_with_retry(text), endpoint_.response_pointer);
    if (!value.is_string()) throw RemoteClientError("response field " + endpoint_.response_pointer + " is not a string");
    return value.get<std::string>();
}

double RemoteJsonClient::call_number(const std::string& text) {
    const auto value = extract(post_with_retry(text), endpoint_.response_pointer);
    if (!value.is_number()) throw RemoteClientError("response field " + endpoint_.response_pointer + " is not a number");
    return value.get<double>();
}

// ---------------------------------------------------------------- scorers

std::vector<ScoredItem> LexiconScorer::score(const std::vector<std::string>& texts) {
    std::vector<ScoredItem> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back({AttributeScore{lexicon_score(lexicon_, t), ScoreSource::local_lexicon}, {}});
    return out;
}

RemoteScorer::RemoteScorer(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport)
    : client_(std::move(endpoint), std::move(transport)) {}

std::vector<ScoredItem> RemoteScorer::score(const std::vector<std::string>& texts) {
    std::vector<ScoredItem> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
        try {
            const double v = client_.call_number(t);
            if (!(v >= 0.0 && v <= 1.0)) throw RemoteClientError("score outside [0,1]");
            out.push_back({AttributeScore{v, ScoreSource::remote}, {}});
        } catch (const RemoteClientError& e) {
            out.push_back({std::nullopt, e.what()});
        }
    }
    return out;
}

// ---------------------------------------------------------------- rephrasers

LocalRephraser::LocalRephraser(Lexicon lexicon, std::map<std::string, std::string> substitutions,
                               std::string placeholder)
    : lexicon_(std::move(lexicon)), substitutions_(std::move(substitutions)), placeholder_(std::move(placeholder)) {}

std::string LocalRephraser::rephrase(const std::string& text) {
    struct Piece {
        std::string text;
        bool is_word;
    };
    std::vector<Piece> pieces;
    std::size_t i = 0;
    while (i < text.size()) {
        const bool space = std::isspace(static_cast<unsigned char>(text[i])) != 0;
        std::size_t j = i;
        while (j < text.size() && (std::isspace(static_cast<unsigned char>(text[j])) != 0) == space) ++j;
        pieces.push_back({text.substr(i, j - i), !space});
        i = j;
    }

    std::ptrdiff_t prev_word = -1;
    for (std::size_t p = 0; p < pieces.size(); ++p) {
        if (!pieces[p].is_word) continue;
        const auto norm = normalize_token(pieces[p].text);
        if (!norm.empty() && lexicon_.contains(norm)) {
            auto it = substitutions_.find(norm);
            const std::string& replacement = it != substitutions_.end() ? it->second : placeholder_;
            // keep leading/trailing punctuation around the replaced word
            const auto& w = pieces[p].text;
            std::size_t b = 0, e = w.size();
            while (b < e && std::ispunct(static_cast<unsigned char>(w[b]))) ++b;
            while (e > b && std::ispunct(static_cast<unsigned char>(w[e - 1]))) --e;
            pieces[p].text = w.substr(0, b) + replacement + w.substr(e);

            if (prev_word >= 0) {
                auto& art = pieces[static_cast<std::size_t>(prev_word)].text;
                const auto art_norm = normalize_token(art);
                if (art_norm == "a" || art_norm == "an") {
                    const bool upper = std::isupper(static_cast<unsigned char>(art[0])) != 0;
                    std::string fixed = starts_with_vowel_sound(replacement) ? "an" : "a";
                    if (upper) fixed[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(fixed[0])));
                    art = fixed;
                }
            }
        }
        prev_word = static_cast<std::ptrdiff_t>(p);
    }
    std::string out;
    for (const auto& piece : pieces) out += piece.text;
    return out;
}

RemoteRephraser::RemoteRephraser(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport)
    : client_(std::move(endpoint), std::move(transport)) {}

std::string RemoteRephraser::rephrase(const std::string& text) {
    return client_.call(render_rephrase_prompt(text));
}

std::unique_ptr<Scorer> make_scorer(const ScorerConfig& config, const Lexicon& lexicon,
                                    std::shared_ptr<Transport> transport) {
    if (config.mode == ClientMode::local) return std::make_unique<LexiconScorer>(lexicon);
    return std::make_unique<RemoteScorer>(config.remote, std::move(transport));
}

std::unique_ptr<Rephraser> make_rephraser(const RephraserConfig& config, const Lexicon& lexicon,
                                          std::shared_ptr<Transport> transport) {
    if (config.mode == ClientMode::local)
        return std::make_unique<LocalRephraser>(lexicon, config.substitutions, config.placeholder);
    return std::make_unique<RemoteRephraser>(config.remote, std::move(transport));
}

}  // namespace headsteer
