#pragma once

#include <map>
#include <string>
#include <vector>

namespace hulm {

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
// fnv1a64 of the file bytes, rendered as "fnv1a64:<16 hex digits>"
std::string file_hash(const std::string& path);
void ensure_dir(const std::string& path);

// index of v in the partition cut at bounds (ascending); bounds {18,21} gives
// buckets (-inf,18) [18,21) [21,inf)
int bucket_index(double v, const std::vector<double>& bounds);

// Human-readable `key = value` run configuration. Lines starting with '#' and
// blank lines are ignored. Keys are unique; re-setting overwrites.
class KvConfig {
public:
    KvConfig() = default;
    static KvConfig parse(const std::string& text);
    static KvConfig parse_file(const std::string& path);

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::string require_str(const std::string& key) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, long value);
    void set_double(const std::string& key, double value);
    void set_bool(const std::string& key, bool value);

    // sorted by key, one `key = value` per line
    std::string serialize() const;
    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

// Shortest decimal form that round-trips the exact double.
std::string format_double(double v);

}  // namespace hulm
