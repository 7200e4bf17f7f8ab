#include "tdaens/artifact.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "tdaens/errors.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t payload_checksum(std::span<const double> payload) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < payload.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string json_digest(const nlohmann::json& j) { return hex64(hash_string(j.dump())); }

std::string encode_artifact(const std::string& kind, nlohmann::json header, std::span<const double> payload) {
  header["kind"] = kind;
  header["version"] = kArtifactVersion;
  header["payload_count"] = payload.size();
  header["payload_checksum"] = hex64(payload_checksum(payload));
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());
  std::string out;
  out.reserve(12 + text.size() + payload.size_bytes());
  out.append(kArtifactMagic, 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += text;
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size_bytes());
  return out;
}

ArtifactFile decode_artifact(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kArtifactMagic, 8) != 0)
    throw FormatError(origin + ": not an artifact file (bad magic)");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t{static_cast<unsigned char>(bytes[8 + i])} << (8 * i);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) throw CorruptionError(origin + ": header extends past end of file");
  ArtifactFile f;
  try {
    f.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(origin + ": unreadable header: " + e.what());
  }
  if (!f.header.is_object() || !f.header.contains("version") || !f.header.contains("kind") ||
      !f.header.contains("payload_count") || !f.header.contains("payload_checksum"))
    throw CorruptionError(origin + ": header is missing required fields");
  const int version = f.header["version"].get<int>();
  if (version != kArtifactVersion)
    throw MigrationError(origin + ": artifact format version " + std::to_string(version) + " is not supported (this build reads version " +
                         std::to_string(kArtifactVersion) + ")");
  const std::size_t body = bytes.size() - 12 - len;
  const auto count = f.header["payload_count"].get<std::size_t>();
  if (body != count * sizeof(double))
    throw CorruptionError(origin + ": payload holds " + std::to_string(body) + " bytes, header declares " +
                          std::to_string(count * sizeof(double)));
  f.payload.resize(count);
  std::memcpy(f.payload.data(), bytes.data() + 12 + len, body);
  if (hex64(payload_checksum(f.payload)) != f.header["payload_checksum"].get<std::string>())
    throw CorruptionError(origin + ": payload checksum mismatch");
  f.kind = f.header["kind"].get<std::string>();
  return f;
}

namespace {

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_artifact(const std::filesystem::path& path, const std::string& kind, nlohmann::json header,
                   std::span<const double> payload) {
  atomic_write(path, encode_artifact(kind, std::move(header), payload));
}

ArtifactFile load_artifact(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_artifact(bytes, path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) { atomic_write(path, text); }

}  // namespace tdaens
