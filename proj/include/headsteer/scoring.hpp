#pragma once

// Attribute scoring and parallel rephrasing clients. Remote clients talk to a
// generic JSON endpoint; local fallbacks run fully offline from a lexicon.

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace headsteer {

class RemoteClientError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class ScoreSource { remote, local_lexicon, local_probe };

const char* to_string(ScoreSource s);
ScoreSource score_source_from_string(std::string_view s);

struct AttributeScore {
    double value = 0.0;
    ScoreSource source = ScoreSource::local_lexicon;
};

/// Per-item result; `score` is empty and `error` set when a remote call failed.
struct ScoredItem {
    std::optional<AttributeScore> score;
    std::string error;
};

/// Lowercased, punctuation-stripped whitespace tokens; empty tokens dropped.
std::vector<std::string> lexicon_tokens(std::string_view text);

class Lexicon {
  public:
    Lexicon() = default;
    explicit Lexicon(std::set<std::string> terms) : terms_(std::move(terms)) {}

    /// One term per line; '#' starts a comment.
    static Lexicon parse(std::string_view text);
    static Lexicon load(const std::filesystem::path& path);

    bool contains(std::string_view normalized_token) const;
    std::size_t size() const { return terms_.size(); }
    const std::set<std::string>& terms() const { return terms_; }

  private:
    std::set<std::string> terms_;
};

/// Matched-token count over total token count.
double lexicon_score(const Lexicon& lexicon, std::string_view text);

enum class ClientMode { remote, local };

struct RemoteEndpoint {
    std::string url;          // scheme://host[:port]/path
    std::string api_key_env;  // environment variable holding the key
    std::chrono::milliseconds timeout{10000};
    int max_attempts = 3;
    std::chrono::milliseconds backoff_base{500};
    double rate_limit_per_second = 1.0;
    /// Request field carrying the text and JSON pointer to the response value.
    std::string request_field;
    std::string response_pointer;

    void validate() const;
    static RemoteEndpoint with_fields(std::string request, std::string response_pointer) {
        RemoteEndpoint e;
        e.request_field = std::move(request);
        e.response_pointer = std::move(response_pointer);
        return e;
    }
};

struct ScorerConfig {
    ClientMode mode = ClientMode::local;
    RemoteEndpoint remote = RemoteEndpoint::with_fields("text", "/score");
};

inline constexpr std::string_view kRephraseTemplate =
    "Please rephrase the following text to convey the same meaning in a non-toxic, respectful, "
    "and positive manner: {input_text}";

std::string render_rephrase_prompt(std::string_view input_text);

struct RephraserConfig {
    ClientMode mode = ClientMode::local;
    RemoteEndpoint remote = RemoteEndpoint::with_fields("prompt", "/text");
    /// Local fallback: lexicon term -> replacement; unmapped matches get the placeholder.
    std::map<std::string, std::string> substitutions;
    std::string placeholder = "[neutral]";
};

/// Serialises outbound requests to at most `per_second` across threads.
class RateLimiter {
  public:
    explicit RateLimiter(double per_second);
    void acquire();

  private:
    std::mutex mutex_;
    std::chrono::steady_clock::duration interval_;
    std::chrono::steady_clock::time_point next_{};
};

struct HttpReply {
    int status = 0;
    std::string body;
    std::string transport_error;
};

/// Transport seam so tests and adapters can stand in for HTTP.
class Transport {
  public:
    virtual ~Transport() = default;
    virtual HttpReply post_json(const RemoteEndpoint& endpoint, const std::string& body,
                                const std::string& api_key) = 0;
};

std::unique_ptr<Transport> make_http_transport();

/// POST with exponential backoff. Returns the parsed response value, or throws
/// RemoteClientError once attempts are exhausted.
class RemoteJsonClient {
  public:
    RemoteJsonClient(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport);

    /// Value at `response_pointer` from the reply to {request_field: text}.
    std::string call(const std::string& text);
    double call_number(const std::string& text);

    const RemoteEndpoint& endpoint() const { return endpoint_; }

  private:
    std::string post_with_retry(const std::string& text);

    RemoteEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    RateLimiter limiter_;
    std::string api_key_;
};

class Scorer {
  public:
    virtual ~Scorer() = default;
    virtual std::vector<ScoredItem> score(const std::vector<std::string>& texts) = 0;
};

class LexiconScorer final : public Scorer {
  public:
    explicit LexiconScorer(Lexicon lexicon) : lexicon_(std::move(lexicon)) {}
    std::vector<ScoredItem> score(const std::vector<std::string>& texts) override;

  private:
    Lexicon lexicon_;
};

class RemoteScorer final : public Scorer {
  public:
    RemoteScorer(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport);
    std::vector<ScoredItem> score(const std::vector<std::string>& texts) override;

  private:
    RemoteJsonClient client_;
};

class Rephraser {
  public:
    virtual ~Rephraser() = default;
    /// Throws RemoteClientError on failure.
    virtual std::string rephrase(const std::string& text) = 0;
};

class LocalRephraser final : public Rephraser {
  public:
    LocalRephraser(Lexicon lexicon, std::map<std::string, std::string> substitutions,
                   std::string placeholder);
    std::string rephrase(const std::string& text) override;

  private:
    Lexicon lexicon_;
    std::map<std::string, std::string> substitutions_;
    std::string placeholder_;
};

class RemoteRephraser final : public Rephraser {
  public:
    RemoteRephraser(RemoteEndpoint endpoint, std::shared_ptr<Transport> transport);
    std::string rephrase(const std::string& text) override;

  private:
    RemoteJsonClient client_;
};

std::unique_ptr<Scorer> make_scorer(const ScorerConfig& config, const Lexicon& lexicon,
                                    std::shared_ptr<Transport> transport = nullptr);
std::unique_ptr<Rephraser> make_rephraser(const RephraserConfig& config, const Lexicon& lexicon,
                                          std::shared_ptr<Transport> transport = nullptr);

/// Parses "term<TAB>replacement" or "term => replacement" lines ('#' comments).
std::map<std::string, std::string> parse_substitutions(std::string_view text);

}  // namespace headsteer
