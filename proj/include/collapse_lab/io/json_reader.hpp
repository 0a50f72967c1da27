#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "collapse_lab/error.hpp"

namespace collapse_lab::io {

/// Reads optional fields from a JSON object and rejects keys nobody asked
/// for. Type mismatches and unknown keys raise Error(Config) naming `where`.
class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        require(j_.is_object(), ErrorKind::Config, where_ + ": expected a JSON object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::Config, where_ + "." + key + ": " + e.what());
        }
    }

    /// Sub-object for nested readers; null when absent.
    [[nodiscard]] const nlohmann::json* child(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

    void finish() const {
        for (const auto& item : j_.items()) {
            require(seen_.count(item.key()) != 0, ErrorKind::Config,
                    where_ + ": unknown key '" + item.key() + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace collapse_lab::io
