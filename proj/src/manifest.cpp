#include "pral/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>

#include "pral/error.hpp"

namespace pral {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DigestCtx {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};
  DigestCtx() {
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  void update(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx.get(), p, n) != 1) throw Error("sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) throw Error("sha256: final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  DigestCtx d;
  d.update(bytes.data(), bytes.size());
  return d.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for hashing");
  DigestCtx d;
  std::array<char, 1 << 16> buf{};
  while (f) {
    f.read(buf.data(), buf.size());
    if (f.gcount() > 0) d.update(buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  return d.hex();
}

void RunManifest::add_file(std::string role, const fs::path& file, const fs::path& manifest_dir) {
  const fs::path abs = fs::absolute(file);
  const fs::path rel = fs::proximate(abs, fs::absolute(manifest_dir.empty() ? fs::path(".") : manifest_dir));
  files.push_back({std::move(role), rel.generic_string(), sha256_file(abs)});
}

const FileFingerprint* RunManifest::find(std::string_view role) const {
  for (const auto& f : files) {
    if (f.role == role) return &f;
  }
  return nullptr;
}

json RunManifest::to_json() const {
  json fl = json::array();
  for (const auto& f : files) fl.push_back({{"role", f.role}, {"path", f.path}, {"sha256", f.sha256}});
  return {{"format", "pral-manifest"}, {"tool_version", tool_version}, {"command", command},
          {"config", config},          {"files", fl},                  {"metrics", metrics}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    if (j.at("format") != "pral-manifest") throw FormatError("not a pral manifest");
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    for (const auto& f : j.at("files")) {
      m.files.push_back({f.at("role").get<std::string>(), f.at("path").get<std::string>(),
                         f.at("sha256").get<std::string>()});
    }
    m.metrics = j.at("metrics");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

void RunManifest::save(const fs::path& path) const {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write manifest " + path.string());
    f << to_json().dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

RunManifest RunManifest::load(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open manifest " + path.string());
  try {
    return from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

std::vector<std::string> verify_manifest(const RunManifest& m, const fs::path& manifest_dir) {
  std::vector<std::string> problems;
  for (const auto& f : m.files) {
    const fs::path p = fs::path(f.path).is_absolute() ? fs::path(f.path) : manifest_dir / f.path;
    if (!fs::exists(p)) {
      problems.push_back(f.role + ": missing " + p.string());
      continue;
    }
    const std::string h = sha256_file(p);
    if (h != f.sha256) problems.push_back(f.role + ": " + p.string() + " hashes to " + h + ", manifest has " + f.sha256);
  }
  return problems;
}

}  // namespace pral
