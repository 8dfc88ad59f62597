#pragma once

// Configuration files: JSON, or the TOML subset used for training configs
// (tables, dotted keys, strings, integers, floats, booleans, arrays, inline
// tables). Both parse to the same JSON tree.

#include <filesystem>
#include <nlohmann/json.hpp>

#include "gsgn/image.hpp"

namespace gsgn {

namespace detail {

class TomlParser {
 public:
  explicit TomlParser(std::string_view text) : s_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) break;
      if (peek() == '[') {
        ++pos_;
        if (peek() == '[') fail("arrays of tables are not supported");
        skip_inline_ws();
        auto path = parse_key_path();
        skip_inline_ws();
        expect(']');
        table = &root;
        for (const auto& k : path) {
          auto& next = (*table)[k];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("key '" + k + "' is not a table");
          table = &next;
        }
      } else {
        auto path = parse_key_path();
        skip_inline_ws();
        expect('=');
        skip_inline_ws();
        auto value = parse_value();
        assign(*table, path, std::move(value));
      }
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    std::size_t line = 1;
    for (std::size_t i = 0; i < pos_ && i < s_.size(); ++i) line += s_[i] == '\n';
    throw Error("TOML line " + std::to_string(line) + ": " + what);
  }

  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[pos_]; }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') ++pos_;
  }
  void skip_ws_comments_newlines() {
    while (!eof()) {
      skip_inline_ws();
      skip_comment();
      if (peek() == '\n' || peek() == '\r') {
        ++pos_;
        continue;
      }
      break;
    }
  }
  void end_of_line() {
    skip_inline_ws();
    skip_comment();
    if (eof()) return;
    if (peek() == '\r') ++pos_;
    if (peek() != '\n') fail("unexpected trailing characters");
    ++pos_;
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> path{parse_key()};
    skip_inline_ws();
    while (peek() == '.') {
      ++pos_;
      skip_inline_ws();
      path.push_back(parse_key());
      skip_inline_ws();
    }
    return path;
  }

  std::string parse_key() {
    if (peek() == '"' || peek() == '\'') return parse_string();
    const std::size_t start = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
    if (start == pos_) fail("expected a key");
    return std::string(s_.substr(start, pos_ - start));
  }

  void assign(nlohmann::json& table, const std::vector<std::string>& path, nlohmann::json value) {
    nlohmann::json* t = &table;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      auto& next = (*t)[path[i]];
      if (next.is_null()) next = nlohmann::json::object();
      if (!next.is_object()) fail("key '" + path[i] + "' is not a table");
      t = &next;
    }
    if (t->contains(path.back())) fail("duplicate key '" + path.back() + "'");
    (*t)[path.back()] = std::move(value);
  }

  std::string parse_string() {
    const char q = peek();
    ++pos_;
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = s_[pos_++];
      if (c == q) break;
      if (q == '"' && c == '\\') {
        if (eof()) fail("unterminated escape");
        char e = s_[pos_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '\\': out += '\\'; break;
          case '"': out += '"'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
        continue;
      }
      out += c;
    }
    return out;
  }

  nlohmann::json parse_value() {
    const char c = peek();
    if (c == '"' || c == '\'') return parse_string();
    if (c == '[') return parse_array();
    if (c == '{') return parse_inline_table();
    if (s_.compare(pos_, 4, "true") == 0) {
      pos_ += 4;
      return true;
    }
    if (s_.compare(pos_, 5, "false") == 0) {
      pos_ += 5;
      return false;
    }
    return parse_number();
  }

  nlohmann::json parse_number() {
    const std::size_t start = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.' || peek() == '_'))
      ++pos_;
    std::string tok;
    for (char ch : s_.substr(start, pos_ - start))
      if (ch != '_') tok += ch;
    if (tok.empty()) fail("expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos;
    try {
      std::size_t used = 0;
      if (is_float) {
        double v = std::stod(tok, &used);
        if (used == tok.size()) return v;
      } else {
        long long v = std::stoll(tok, &used, 10);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + tok + "'");
  }

  nlohmann::json parse_array() {
    expect('[');
    nlohmann::json arr = nlohmann::json::array();
    while (true) {
      skip_ws_comments_newlines();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_ws_comments_newlines();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      skip_ws_comments_newlines();
      expect(']');
      return arr;
    }
  }

  nlohmann::json parse_inline_table() {
    expect('{');
    nlohmann::json obj = nlohmann::json::object();
    skip_inline_ws();
    if (peek() == '}') {
      ++pos_;
      return obj;
    }
    while (true) {
      skip_inline_ws();
      auto path = parse_key_path();
      skip_inline_ws();
      expect('=');
      skip_inline_ws();
      assign(obj, path, parse_value());
      skip_inline_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      expect('}');
      return obj;
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline nlohmann::json parse_toml(std::string_view text) { return detail::TomlParser(text).parse(); }

/// Parses by extension: .toml as TOML, anything else as JSON.
inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    if (path.extension() == ".toml") return parse_toml(text);
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace gsgn
