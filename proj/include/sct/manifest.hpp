#pragma once

#include <chrono>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sct/container.hpp"

namespace sct {

// One manifest per CLI invocation, written alongside the outputs.
// Fingerprints are 64-bit FNV-1a over the file bytes.
class RunManifest {
  public:
    RunManifest(std::string command, std::uint64_t seed)
        : start_(std::chrono::steady_clock::now()) {
        j_["command"] = std::move(command);
        j_["seed"] = seed;
        j_["inputs"] = nlohmann::json::object();
        j_["outputs"] = nlohmann::json::array();
        j_["config"] = nlohmann::json::object();
    }

    void config(const std::string& key, const nlohmann::json& value) { j_["config"][key] = value; }
    void input(const std::string& path) { j_["inputs"][path] = fnv1a64_file(path); }
    void output(const std::string& path) { j_["outputs"].push_back(path); }

    void write(const std::string& path) {
        const auto dur = std::chrono::steady_clock::now() - start_;
        j_["duration_seconds"] =
            std::chrono::duration_cast<std::chrono::duration<double>>(dur).count();
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot write manifest: " + path);
        os << j_.dump(2) << '\n';
    }

  private:
    nlohmann::json j_;
    std::chrono::steady_clock::time_point start_;
};

} // namespace sct
