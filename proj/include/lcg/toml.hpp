#pragma once

// Minimal TOML subset used for run configuration: [sections], key = value
// with quoted strings, integers, floats, booleans and single-line arrays,
// plus # comments.  Keys are stored flat as "section.key".

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lcg/common.hpp"

namespace lcg::toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<std::string, int64_t, double, bool, Array> v;

    bool is_string() const { return std::holds_alternative<std::string>(v); }
    bool is_int() const { return std::holds_alternative<int64_t>(v); }
    bool is_float() const { return std::holds_alternative<double>(v); }
    bool is_bool() const { return std::holds_alternative<bool>(v); }
    bool is_array() const { return std::holds_alternative<Array>(v); }
};

class Table {
  public:
    bool has(const std::string& key) const { return items_.count(key) > 0; }

    void set(const std::string& key, Value val) { items_[key] = std::move(val); }

    std::string get_string(const std::string& key) const {
        const Value& val = fetch(key);
        if (!val.is_string()) throw DataError("config key '" + key + "' is not a string");
        return std::get<std::string>(val.v);
    }

    int64_t get_int(const std::string& key) const {
        const Value& val = fetch(key);
        if (!val.is_int()) throw DataError("config key '" + key + "' is not an integer");
        return std::get<int64_t>(val.v);
    }

    double get_float(const std::string& key) const {
        const Value& val = fetch(key);
        if (val.is_int()) return static_cast<double>(std::get<int64_t>(val.v));
        if (!val.is_float()) throw DataError("config key '" + key + "' is not a number");
        return std::get<double>(val.v);
    }

    bool get_bool(const std::string& key) const {
        const Value& val = fetch(key);
        if (!val.is_bool()) throw DataError("config key '" + key + "' is not a boolean");
        return std::get<bool>(val.v);
    }

    std::vector<double> get_float_array(const std::string& key) const {
        const Value& val = fetch(key);
        if (!val.is_array()) throw DataError("config key '" + key + "' is not an array");
        std::vector<double> out;
        for (const Value& e : std::get<Array>(val.v)) {
            if (e.is_int()) {
                out.push_back(static_cast<double>(std::get<int64_t>(e.v)));
            } else if (e.is_float()) {
                out.push_back(std::get<double>(e.v));
            } else {
                throw DataError("config key '" + key + "' has a non-numeric element");
            }
        }
        return out;
    }

    std::string get_string_or(const std::string& key, const std::string& fallback) const {
        return has(key) ? get_string(key) : fallback;
    }
    int64_t get_int_or(const std::string& key, int64_t fallback) const {
        return has(key) ? get_int(key) : fallback;
    }
    double get_float_or(const std::string& key, double fallback) const {
        return has(key) ? get_float(key) : fallback;
    }
    bool get_bool_or(const std::string& key, bool fallback) const { return has(key) ? get_bool(key) : fallback; }

    const std::map<std::string, Value>& items() const { return items_; }

  private:
    const Value& fetch(const std::string& key) const {
        auto it = items_.find(key);
        if (it == items_.end()) throw DataError("config key '" + key + "' is missing");
        return it->second;
    }

    std::map<std::string, Value> items_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return s.substr(a, b - a);
}

[[noreturn]] inline void fail(int line, const std::string& msg) {
    throw DataError(format_msg("config line %d: %s", line, msg.c_str()));
}

inline bool ident_ok(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    }
    return true;
}

// Parses one scalar or array from s starting at pos; advances pos past it.
inline Value parse_value(std::string_view s, size_t& pos, int line) {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    if (pos >= s.size()) fail(line, "missing value");
    char c = s[pos];
    if (c == '"') {
        std::string out;
        ++pos;
        while (pos < s.size() && s[pos] != '"') {
            if (s[pos] == '\\') {
                ++pos;
                if (pos >= s.size()) fail(line, "dangling escape in string");
                switch (s[pos]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: fail(line, "unsupported escape in string");
                }
            } else {
                out += s[pos];
            }
            ++pos;
        }
        if (pos >= s.size()) fail(line, "unterminated string");
        ++pos;  // closing quote
        return Value{out};
    }
    if (c == '[') {
        ++pos;
        Array arr;
        while (true) {
            while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
            if (pos >= s.size()) fail(line, "unterminated array");
            if (s[pos] == ']') {
                ++pos;
                break;
            }
            arr.push_back(parse_value(s, pos, line));
            while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
            if (pos < s.size() && s[pos] == ',') {
                ++pos;
                continue;
            }
            if (pos < s.size() && s[pos] == ']') {
                ++pos;
                break;
            }
            fail(line, "expected ',' or ']' in array");
        }
        return Value{arr};
    }
    size_t end = pos;
    while (end < s.size() && s[end] != ' ' && s[end] != '\t' && s[end] != ',' && s[end] != ']' && s[end] != '#') {
        ++end;
    }
    std::string tok(s.substr(pos, end - pos));
    pos = end;
    if (tok == "true") return Value{true};
    if (tok == "false") return Value{false};
    try {
        size_t used = 0;
        if (tok.find_first_of(".eE") == std::string::npos) {
            int64_t i = std::stoll(tok, &used);
            if (used == tok.size()) return Value{i};
        } else {
            double d = std::stod(tok, &used);
            if (used == tok.size()) return Value{d};
        }
    } catch (const std::exception&) {
    }
    fail(line, "cannot parse value '" + tok + "'");
}

}  // namespace detail

inline Table parse(const std::string& text) {
    Table table;
    std::string section;
    int line_no = 0;
    size_t start = 0;
    while (start <= text.size()) {
        size_t nl = text.find('\n', start);
        std::string_view line(text.data() + start, (nl == std::string::npos ? text.size() : nl) - start);
        start = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        std::string_view t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t[0] == '[') {
            if (t.back() != ']') detail::fail(line_no, "malformed section header");
            std::string_view name = detail::trim(t.substr(1, t.size() - 2));
            if (!detail::ident_ok(name)) detail::fail(line_no, "malformed section name");
            section = std::string(name);
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string_view::npos) detail::fail(line_no, "expected 'key = value'");
        std::string_view key = detail::trim(t.substr(0, eq));
        if (!detail::ident_ok(key)) detail::fail(line_no, "malformed key");
        size_t pos = 0;
        std::string_view rest = t.substr(eq + 1);
        Value val = detail::parse_value(rest, pos, line_no);
        while (pos < rest.size() && (rest[pos] == ' ' || rest[pos] == '\t')) ++pos;
        if (pos < rest.size() && rest[pos] != '#') detail::fail(line_no, "trailing characters after value");
        std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
        if (table.has(full)) detail::fail(line_no, "duplicate key '" + full + "'");
        table.set(full, std::move(val));
    }
    return table;
}

inline Table parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(text);
}

}  // namespace lcg::toml
