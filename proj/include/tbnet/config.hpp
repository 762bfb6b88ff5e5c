#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tbnet {

/// Line-oriented key=value configuration with a fixed key registry.
/// Unknown keys fail loudly so typos cannot silently fall back to
/// defaults. The canonical string (sorted keys, defaults materialized)
/// feeds the config hash that stage artifacts embed.
class Config {
  public:
    Config(); // all defaults

    static Config from_file(const std::string& path);

    /// `key=value`; rejects unknown keys with the known-key list.
    void set(const std::string& key, const std::string& value);
    void set_line(const std::string& line); // "key=value" as one string

    const std::string& get(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;

    std::string canonical_string() const;
    std::string hash() const; // hex digest of the canonical string

    static const std::vector<std::string>& known_keys();

  private:
    std::map<std::string, std::string> values_;
};

} // namespace tbnet
