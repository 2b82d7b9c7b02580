#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace headsteer {

/// Greedy longest-match tokenizer over a JSON vocabulary with byte-level
/// fallback. Byte entries are spelled "<0xNN>"; special tokens are spelled
/// "<|name|>" and detokenize to nothing.
class Tokenizer {
  public:
    Tokenizer() = default;

    static Tokenizer from_json(const std::string& json_text);
    static Tokenizer load(const std::filesystem::path& path);
    /// 256 byte tokens (id = byte value) followed by "<|bos|>".
    static Tokenizer byte_level();

    std::string to_json() const;
    void save(const std::filesystem::path& path) const;

    std::vector<std::int32_t> encode(std::string_view text) const;
    std::string decode(const std::vector<std::int32_t>& tokens) const;

    std::size_t vocab_size() const { return pieces_.size(); }
    std::int32_t bos_id() const { return bos_; }
    std::optional<std::int32_t> find(const std::string& piece) const;

  private:
    void index();

    std::vector<std::string> pieces_;  // id -> spelling
    std::map<std::string, std::int32_t, std::less<>> text_pieces_;
    std::int32_t byte_ids_[256] = {};
    std::vector<std::int16_t> byte_of_id_;  // -1 unless the id is a byte token
    std::vector<bool> special_;
    std::size_t longest_piece_ = 1;
    std::int32_t bos_ = -1;
};

}  // namespace headsteer
