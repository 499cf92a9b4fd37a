#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cldis/common.hpp"

namespace cldis {

// Plain-text key=value file. Order-preserving writer, structured errors that
// name the offending key on the read side. Used for manifests and run configs.
class KvFile {
public:
    void set(const std::string& key, const std::string& value) {
        if (!index_.count(key)) {
            order_.push_back(key);
        }
        index_[key] = value;
    }
    void set(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
    void set(const std::string& key, double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        set(key, std::string(buf));
    }

    bool has(const std::string& key) const { return index_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError(name_ + ": missing key '" + key + "'");
        return it->second;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = index_.find(key);
        return it == index_.end() ? fallback : it->second;
    }

    int64_t get_int(const std::string& key) const {
        const std::string& s = get(key);
        try {
            size_t pos = 0;
            int64_t v = std::stoll(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError(name_ + ": key '" + key + "': invalid integer '" + s + "'");
        }
    }

    double get_double(const std::string& key) const {
        const std::string& s = get(key);
        try {
            size_t pos = 0;
            double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError(name_ + ": key '" + key + "': invalid number '" + s + "'");
        }
    }

    const std::vector<std::string>& keys() const { return order_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw ConfigError("cannot write " + path.string());
        for (const auto& k : order_) f << k << "=" << index_.at(k) << "\n";
    }

    static KvFile load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ConfigError("cannot read " + path.string());
        KvFile kv;
        kv.name_ = path.filename().string();
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError(kv.name_ + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            kv.set(line.substr(0, eq), line.substr(eq + 1));
        }
        return kv;
    }

    void set_name(const std::string& n) { name_ = n; }

private:
    std::string name_ = "kvfile";
    std::vector<std::string> order_;
    std::map<std::string, std::string> index_;
};

// Raw little-endian array files.
static_assert(std::endian::native == std::endian::little, "raw array I/O assumes little-endian");

template <typename T>
void write_raw(const std::filesystem::path& path, const T* data, size_t count) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(data), std::streamsize(count * sizeof(T)));
    if (!f) throw ConfigError("short write to " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, size_t expected_count) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw ConfigError("cannot read " + path.string());
    const auto bytes = size_t(f.tellg());
    if (bytes != expected_count * sizeof(T))
        throw ConfigError(path.string() + ": expected " + std::to_string(expected_count * sizeof(T)) +
                          " bytes, found " + std::to_string(bytes));
    std::vector<T> out(expected_count);
    f.seekg(0);
    f.read(reinterpret_cast<char*>(out.data()), std::streamsize(bytes));
    return out;
}

}  // namespace cldis
