#pragma once

#include "qkdsim/error.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace qkdsim {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace detail {

    inline std::string read_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw ParseError(path.string() + ": cannot open file");
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    // Converts a byte offset reported by the JSON parser into "line:col".
    inline std::string line_col(std::string_view text, std::size_t byte) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        return std::to_string(line) + ":" + std::to_string(col);
    }

    template <typename T>
    T require(const json& obj, const char* key, std::string_view ctx) {
        if (!obj.is_object() || !obj.contains(key)) {
            throw ValidationError(std::string(ctx) + ": missing field '" + key + "'");
        }
        try {
            return obj.at(key).get<T>();
        } catch (const json::exception&) {
            throw ValidationError(std::string(ctx) + ": field '" + key + "' has the wrong type");
        }
    }

    template <typename T>
    T optional_field(const json& obj, const char* key, T fallback, std::string_view ctx) {
        if (!obj.contains(key) || obj.at(key).is_null()) {
            return fallback;
        }
        return require<T>(obj, key, ctx);
    }

} // namespace detail

// Parses a JSON document from disk; syntax errors are reported as file:line:col.
inline json load_json_file(const std::filesystem::path& path) {
    const std::string text = detail::read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ":" + detail::line_col(text, e.byte) + ": " + e.what());
    }
}

} // namespace qkdsim
