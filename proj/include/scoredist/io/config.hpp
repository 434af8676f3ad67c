#pragma once

// Flat, typed, human-readable run configuration: a single JSON object whose
// keys are dotted names ("loss.mode", "guidance.cfg_scale", ...). Unknown
// keys are errors, so every knob in a run record has a registered meaning.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace scoredist {

class FlatConfig {
public:
    using json = nlohmann::json;

    FlatConfig() = default;

    static FlatConfig from_json(const json& j) {
        if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
        FlatConfig c;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!it.value().is_primitive()) {
                throw std::invalid_argument("config value for '" + it.key() +
                                            "' must be a scalar");
            }
            c.values_[it.key()] = it.value();
        }
        return c;
    }

    static FlatConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open config file " + path);
        json j;
        is >> j;
        return from_json(j);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    void set(const std::string& key, json value) { values_[key] = std::move(value); }

    template <typename T>
    T get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::invalid_argument("missing config key '" + key + "'");
        try {
            return it->second.get<T>();
        } catch (const json::exception&) {
            throw std::invalid_argument("config key '" + key + "' has the wrong type");
        }
    }

    template <typename T>
    T get_or(const std::string& key, T fallback) const {
        return has(key) ? get<T>(key) : fallback;
    }

    // every present key must be registered
    void require_known(const std::set<std::string>& allowed) const {
        for (const auto& [k, v] : values_) {
            if (!allowed.count(k)) {
                throw std::invalid_argument("unknown config key '" + k + "'");
            }
        }
    }

    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

    // FNV-1a over the canonical (key-sorted) dump; identifies run inputs.
    uint64_t hash() const {
        const std::string dump = to_json().dump();
        uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : dump) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::string hash_hex() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
        return buf;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("cannot write config file " + path);
        os << to_json().dump(2) << "\n";
    }

    const std::map<std::string, json>& values() const { return values_; }

private:
    std::map<std::string, json> values_;  // ordered, so dumps are canonical
};

}  // namespace scoredist
