#pragma once

// Run manifests: enough recorded state to replay a CLI command and check that
// its data outputs come out byte-identical.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace imccd {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kManifestSchema = "imccd.manifest.v1";

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::string file_digest(const std::filesystem::path& path);  // throws InputError when unreadable

std::string read_file(const std::filesystem::path& path);  // throws InputError
void write_file(const std::filesystem::path& path, std::string_view bytes);  // throws InputError

struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string command;
    std::vector<std::string> args;  // expanded arguments after the subcommand
    std::string resolved_config;    // every option with its effective value
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, std::string> inputs;   // path -> digest
    std::map<std::string, std::string> outputs;  // path -> digest
    double wall_seconds = 0.0;
    nlohmann::json counters = nlohmann::json::object();

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);  // throws DataError
};

}  // namespace imccd
