#include "imccd/manifest.hpp"

#include "imccd/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace imccd {

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw InputError("short write to '" + path.string() + "'");
}

std::string file_digest(const std::filesystem::path& path) { return "fnv1a64:" + hex64(fnv1a64(read_file(path))); }

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j;
    j["schema"] = kManifestSchema;
    j["tool_version"] = tool_version;
    j["command"] = command;
    j["args"] = args;
    j["resolved_config"] = resolved_config;
    j["seeds"] = seeds;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["timing"] = {{"wall_seconds", wall_seconds}};
    j["counters"] = counters;
    return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("schema", "") != kManifestSchema) throw DataError("not a run manifest");
    try {
        RunManifest m;
        m.tool_version = j.at("tool_version").get<std::string>();
        m.command = j.at("command").get<std::string>();
        m.args = j.at("args").get<std::vector<std::string>>();
        m.resolved_config = j.value("resolved_config", "");
        m.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
        m.inputs = j.value("inputs", std::map<std::string, std::string>{});
        m.outputs = j.value("outputs", std::map<std::string, std::string>{});
        if (j.contains("timing")) m.wall_seconds = j["timing"].value("wall_seconds", 0.0);
        m.counters = j.value("counters", nlohmann::json::object());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
}

}  // namespace imccd
