#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tdaens {

/// Container layout: 8-byte magic "TDAENS01", 4-byte little-endian header
/// length, UTF-8 JSON header, then the payload as little-endian float64.
/// The header always carries "kind", "version", "payload_count" and
/// "payload_checksum"; callers add shapes, seeds and digests.
struct ArtifactFile {
  std::string kind;
  nlohmann::json header;
  std::vector<double> payload;
};

inline constexpr char kArtifactMagic[9] = "TDAENS01";
inline constexpr int kArtifactVersion = 1;

/// Writes to a temporary sibling and renames it into place.
void save_artifact(const std::filesystem::path& path, const std::string& kind, nlohmann::json header,
                   std::span<const double> payload);

/// Validates magic, version, payload length and checksum.
ArtifactFile load_artifact(const std::filesystem::path& path);

/// Serialized bytes of an artifact; save_artifact writes exactly these.
std::string encode_artifact(const std::string& kind, nlohmann::json header, std::span<const double> payload);
ArtifactFile decode_artifact(const std::string& bytes, const std::string& origin = "<memory>");

std::string hex64(std::uint64_t v);
std::uint64_t payload_checksum(std::span<const double> payload);

/// Digest of a JSON value (canonical dump, sorted keys).
std::string json_digest(const nlohmann::json& j);

/// Atomic text write (temporary file + rename).
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tdaens
