#include "tbnet/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tbnet/common.hpp"

namespace tbnet {

namespace {

struct KeySpec {
    const char* key;
    const char* default_value;
};

// Defaults target the desk-scale experiment; full-scale values are noted
// where they differ (lr_schedule_period 100 at full scale).
const KeySpec kKeys[] = {
    {"seed", "1"},
    {"arch", "tiny4"},

    {"data.format", "idx"},           // idx | cifar
    {"data.train_images", "train-images.idx"},
    {"data.train_labels", "train-labels.idx"},
    {"data.test_images", "test-images.idx"},
    {"data.test_labels", "test-labels.idx"},
    {"data.cifar_train", "train.bin"},
    {"data.cifar_test", "test.bin"},
    {"data.num_classes", "10"},
    {"data.norm_mean", "0.5"},        // comma-separated per channel
    {"data.norm_std", "0.5"},
    {"data.train_size", "0"},         // 0 = full set
    {"data.test_size", "0"},

    {"victim.epochs", "10"},
    {"victim.lr", "0.1"},
    {"victim.momentum", "0.9"},
    {"victim.weight_decay", "1e-4"},
    {"victim.batch_size", "64"},
    {"victim.lr_schedule_period", "5"},

    {"transfer.epochs", "8"},
    {"transfer.lr", "0.1"},
    {"transfer.momentum", "0.9"},
    {"transfer.weight_decay", "1e-4"},
    {"transfer.batch_size", "64"},
    {"transfer.lr_schedule_period", "5"},
    {"transfer.lambda", "1e-4"},
    {"transfer.sparsity_mode", "composite"}, // composite | separate
    {"transfer.merge_logits", "true"},

    {"prune.ratio", "0.10"},
    {"prune.theta_drop", "0.02"},
    {"prune.retrain_epochs", "2"},
    {"prune.max_iterations", "16"},

    {"finalize.posthoc", "true"},
    {"finalize.posthoc_epochs", "2"},
    {"finalize.posthoc_lr", "0.01"},

    {"simulate.num_inputs", "100"},

    {"attack.fractions", "0.01,0.05,0.1,0.25,0.5,1.0"},
    {"attack.finetune_epochs", "4"},
    {"attack.finetune_lr", "0.01"},
    {"attack.tee_retrain_epochs", "6"},
    {"attack.tee_retrain_lr", "0.05"},
};

const std::map<std::string, std::string>& default_map() {
    static const std::map<std::string, std::string> m = [] {
        std::map<std::string, std::string> d;
        for (const KeySpec& k : kKeys) d[k.key] = k.default_value;
        return d;
    }();
    return m;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

Config::Config() : values_(default_map()) {}

const std::vector<std::string>& Config::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [key, _] : default_map()) k.push_back(key);
        return k;
    }();
    return keys;
}

Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(strcat_msg(path, ": cannot open config file"));
    Config cfg;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        try {
            cfg.set_line(t);
        } catch (const Error& e) {
            throw ValidationError(strcat_msg(path, ":", lineno, ": ", e.what()));
        }
    }
    return cfg;
}

void Config::set_line(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos)
        throw ValidationError(strcat_msg("expected key=value, got '", line, "'"));
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
    if (!default_map().count(key)) {
        std::ostringstream known;
        for (const auto& k : known_keys()) known << "\n  " << k;
        throw ValidationError(strcat_msg("unknown config key '", key, "'. Known keys:",
                                         known.str()));
    }
    values_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
        throw ValidationError(strcat_msg("unknown config key '", key, "'"));
    return it->second;
}

int64_t Config::get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
        size_t pos = 0;
        const int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(strcat_msg(key, ": '", v, "' is not an integer"));
    }
}

uint64_t Config::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    try {
        // stoull wraps negatives around instead of failing; catch them first.
        if (v.find('-') != std::string::npos) throw std::invalid_argument(v);
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(strcat_msg(key, ": '", v, "' is not a nonnegative integer"));
    }
}

double Config::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size() || !std::isfinite(r)) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(strcat_msg(key, ": '", v, "' is not a finite number"));
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError(strcat_msg(key, ": '", v, "' is not a boolean"));
}

std::vector<double> Config::get_double_list(const std::string& key) const {
    const std::string& v = get(key);
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            size_t pos = 0;
            const double r = std::stod(item, &pos);
            if (pos != item.size() || !std::isfinite(r)) throw std::invalid_argument(item);
            out.push_back(r);
        } catch (const std::exception&) {
            throw ValidationError(strcat_msg(key, ": '", item, "' is not a finite number"));
        }
    }
    if (out.empty()) throw ValidationError(strcat_msg(key, ": empty list"));
    return out;
}

std::string Config::canonical_string() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

std::string Config::hash() const {
    const uint64_t h = fnv1a64(canonical_string());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace tbnet
