#include "headsteer/tokenizer.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace headsteer {

namespace {

std::optional<int> parse_byte_piece(const std::string& s) {
    if (s.size() != 6 || s.compare(0, 3, "<0x") != 0 || s[5] != '>') return std::nullopt;
    int value = 0;
    for (int i = 3; i < 5; ++i) {
        const char c = s[static_cast<std::size_t>(i)];
        int digit = 0;
        if (c >= '0' && c <= '9') digit = c - '0';
        else if (c >= 'A' && c <= 'F') digit = c - 'A' + 10;
        else if (c >= 'a' && c <= 'f') digit = c - 'a' + 10;
        else return std::nullopt;
        value = value * 16 + digit;
    }
    return value;
}

bool is_special(const std::string& s) {
    return s.size() > 4 && s.compare(0, 2, "<|") == 0 && s.compare(s.size() - 2, 2, "|>") == 0;
}

std::string byte_piece(int b) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", b);
    return buf;
}

}  // namespace

Tokenizer Tokenizer::from_json(const std::string& json_text) {
    const auto doc = nlohmann::json::parse(json_text);
    if (!doc.is_object()) throw std::runtime_error("tokenizer vocabulary must be a JSON object");
    Tokenizer tok;
    tok.pieces_.resize(doc.size());
    std::vector<bool> seen(doc.size(), false);
    for (const auto& [piece, id_json] : doc.items()) {
        const auto id = id_json.get<std::int64_t>();
        if (id < 0 || static_cast<std::size_t>(id) >= doc.size())
            throw std::runtime_error("tokenizer id out of range for piece '" + piece + "'");
        if (seen[static_cast<std::size_t>(id)])
            throw std::runtime_error("duplicate tokenizer id " + std::to_string(id));
        seen[static_cast<std::size_t>(id)] = true;
        tok.pieces_[static_cast<std::size_t>(id)] = piece;
    }
    tok.index();
    return tok;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open tokenizer file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

Tokenizer Tokenizer::byte_level() {
    Tokenizer tok;
    for (int b = 0; b < 256; ++b) tok.pieces_.push_back(byte_piece(b));
    tok.pieces_.push_back("<|bos|>");
    tok.index();
    return tok;
}

void Tokenizer::index() {
    byte_of_id_.assign(pieces_.size(), -1);
    special_.assign(pieces_.size(), false);
    for (auto& b : byte_ids_) b = -1;
    text_pieces_.clear();
    longest_piece_ = 1;
    for (std::size_t id = 0; id < pieces_.size(); ++id) {
        const auto& p = pieces_[id];
        const auto sid = static_cast<std::int32_t>(id);
        if (auto b = parse_byte_piece(p)) {
            byte_ids_[*b] = sid;
            byte_of_id_[id] = static_cast<std::int16_t>(*b);
        } else if (is_special(p)) {
            special_[id] = true;
            if (p == "<|bos|>") bos_ = sid;
        } else if (!p.empty()) {
            text_pieces_.emplace(p, sid);
            longest_piece_ = std::max(longest_piece_, p.size());
        }
    }
    for (int b = 0; b < 256; ++b)
        if (byte_ids_[b] < 0) throw std::runtime_error("tokenizer lacks byte fallback entry " + byte_piece(b));
}

std::string Tokenizer::to_json() const {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (std::size_t id = 0; id < pieces_.size(); ++id) doc[pieces_[id]] = id;
    return doc.dump(1);
}

void Tokenizer::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write tokenizer file: " + path.string());
    out << to_json() << '\n';
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t best_len = 0;
        std::int32_t best_id = -1;
        const std::size_t max_len = std::min(longest_piece_, text.size() - i);
        for (std::size_t len = max_len; len >= 1 && !text_pieces_.empty(); --len) {
            auto it = text_pieces_.find(text.substr(i, len));
            if (it != text_pieces_.end()) {
                best_len = len;
                best_id = it->second;
                break;
            }
        }
        if (best_len == 0) {
            ids.push_back(byte_ids_[static_cast<unsigned char>(text[i])]);
            ++i;
        } else {
            ids.push_back(best_id);
            i += best_len;
        }
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<std::int32_t>& tokens) const {
    std::string text;
    for (auto t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= pieces_.size())
            throw std::out_of_range("token id " + std::to_string(t) + " out of vocabulary range");
        const auto id = static_cast<std::size_t>(t);
        if (byte_of_id_[id] >= 0) text.push_back(static_cast<char>(byte_of_id_[id]));
        else if (!special_[id]) text += pieces_[id];
    }
    return text;
}

std::optional<std::int32_t> Tokenizer::find(const std::string& piece) const {
    for (std::size_t id = 0; id < pieces_.size(); ++id)
        if (pieces_[id] == piece) return static_cast<std::int32_t>(id);
    return std::nullopt;
}

}  // namespace headsteer
