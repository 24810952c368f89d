#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace pral {

inline constexpr std::string_view kToolVersion = "0.1.0";

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct FileFingerprint {
  std::string role;  // "corpus", "vocab", "teacher", "checkpoint", "loss_log", ...
  std::string path;  // relative to the manifest's directory when possible
  std::string sha256;

  friend bool operator==(const FileFingerprint&, const FileFingerprint&) = default;
};

struct RunManifest {
  std::string tool_version{kToolVersion};
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<FileFingerprint> files;
  nlohmann::json metrics = nlohmann::json::array();

  // Hashes `file` now and records it relative to `manifest_dir`.
  void add_file(std::string role, const std::filesystem::path& file, const std::filesystem::path& manifest_dir);
  const FileFingerprint* find(std::string_view role) const;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

// Recomputes every fingerprint; returns one message per mismatch or missing
// file (empty when the manifest verifies).
std::vector<std::string> verify_manifest(const RunManifest& m, const std::filesystem::path& manifest_dir);

}  // namespace pral
