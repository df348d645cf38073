#include "nifm/io.hpp"

#include <bit>
#include <cstring>
#include <sstream>
#include <unistd.h>

namespace nifm::io {

namespace {

void to_little_endian(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i + 4 <= bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  return tmp;
}

}  // namespace

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
  }
  std::filesystem::rename(tmp, path);
}

void write_header_payload(const std::filesystem::path& path, const ordered_json& header,
                          std::span<const float> payload) {
  std::string content = header.dump();
  content.push_back('\n');
  std::vector<char> bytes(payload.size() * sizeof(float));
  if (!payload.empty()) std::memcpy(bytes.data(), payload.data(), bytes.size());
  to_little_endian(bytes);
  content.append(bytes.begin(), bytes.end());
  write_atomic(path, content);
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return in;
}

nlohmann::json read_header_line(std::istream& in, const std::filesystem::path& path,
                                const std::string& magic, int version) {
  std::string line;
  if (!std::getline(in, line) || in.eof()) {
    throw FormatError("'" + path.string() + "': missing header line");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path.string() + "': malformed header: " + e.what());
  }
  if (!header.is_object()) throw FormatError("'" + path.string() + "': header is not an object");
  if (header.value("magic", std::string{}) != magic) {
    throw FormatError("'" + path.string() + "': expected magic '" + magic + "'");
  }
  const int found = header_get<int>(header, "version");
  if (found != version) {
    throw FormatError("'" + path.string() + "': unsupported version " + std::to_string(found) +
                      " (expected " + std::to_string(version) + ")");
  }
  return header;
}

std::vector<float> read_f32_exact(std::istream& in, std::size_t count,
                                  const std::filesystem::path& path) {
  std::vector<char> bytes(count * sizeof(float));
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != bytes.size()) {
    std::ostringstream msg;
    msg << "'" << path.string() << "': truncated payload (" << got << " of " << bytes.size()
        << " bytes)";
    throw FormatError(msg.str());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("'" + path.string() + "': payload longer than declared");
  }
  to_little_endian(bytes);
  std::vector<float> out(count);
  if (count) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace nifm::io
