#pragma once

// key=value text files: one pair per line, '#' starts a comment.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>

#include "condtok/error.hpp"

namespace condtok {

class KeyValues {
public:
    static KeyValues parse(std::istream& in, const std::string& source = "<config>") {
        KeyValues kv;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ParseError(source + ":" + std::to_string(lineno) + ": expected key=value");
            }
            const std::string key = trim(t.substr(0, eq));
            if (key.empty()) throw ParseError(source + ":" + std::to_string(lineno) + ": empty key");
            if (kv.values_.count(key)) {
                throw ParseError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            }
            kv.values_[key] = trim(t.substr(eq + 1));
        }
        return kv;
    }

    static KeyValues parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KeyValues parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open config '" + path + "'");
        return parse(in, path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    // Accessors mark keys as consumed so leftovers can be reported.
    std::string get_string(const std::string& key, const std::string& fallback) const {
        used_[key] = true;
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::uint64_t get_count(const std::string& key, std::uint64_t fallback) const {
        const std::string s = get_string(key, "");
        if (s.empty()) return fallback;
        std::uint64_t v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) {
            throw ParseError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
        }
        return v;
    }

    double get_real(const std::string& key, double fallback) const {
        const std::string s = get_string(key, "");
        if (s.empty()) return fallback;
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size() || !std::isfinite(v)) {
            throw ParseError("config key '" + key + "': expected a number, got '" + s + "'");
        }
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        const std::string s = get_string(key, "");
        if (s.empty()) return fallback;
        if (s == "true" || s == "1" || s == "on") return true;
        if (s == "false" || s == "0" || s == "off") return false;
        throw ParseError("config key '" + key + "': expected true/false, got '" + s + "'");
    }

    void require_all_used() const {
        for (const auto& [k, v] : values_) {
            if (!used_.count(k)) throw ParseError("unknown config key '" + k + "'");
        }
    }

    const std::map<std::string, std::string>& entries() const noexcept { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> used_;
};

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace condtok
