#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

// Flat `section.key = value` run configuration. Every key is registered with
// a default, so a config file is optional; unknown keys are rejected with the
// offending line number. Values parse totally up front.
class RunConfig {
public:
    // path may be empty: defaults only.
    static RunConfig load(const std::string& path);

    std::int64_t i64(const std::string& key) const;
    std::uint64_t u64(const std::string& key) const;
    double f64(const std::string& key) const;
    bool boolean(const std::string& key) const;
    std::string str(const std::string& key) const;
    std::vector<int> int_list(const std::string& key) const;
    std::pair<double, double> range(const std::string& key) const;

    void override_value(const std::string& key, const std::string& value);

    // Canonical `key = value` text over all registered keys; hash of it is the
    // reproducibility fingerprint.
    std::string echo() const;
    std::uint64_t content_hash() const;

    static std::string help_text();

private:
    std::string raw(const std::string& key) const;
    std::map<std::string, std::string> values_;
};

struct CliOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> workers;
};

// Executes one subcommand (gen-data, train, eval, bench-scaling, bench-batch,
// infer, match-hist). Creates a fresh run directory under the configured
// output root and writes that command's artifacts plus a manifest. Throws
// Error on failure; the caller maps codes to process exit codes.
std::string run_command(const std::string& command, const CliOptions& options);

} // namespace nowcast
