#pragma once

// Shared plumbing for the "JSON header line + little-endian f32 payload"
// files (grids, flow-map samples, checkpoints) and atomic artifact writes.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "nifm/error.hpp"

namespace nifm::io {

using ordered_json = nlohmann::ordered_json;

/// Writes `content` to `path` via a sibling temp file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& content);

/// Header line, '\n', raw LE float32 payload; written atomically.
void write_header_payload(const std::filesystem::path& path, const ordered_json& header,
                          std::span<const float> payload);

std::ifstream open_binary(const std::filesystem::path& path);

/// Parses the first line as a JSON object and checks magic and version.
nlohmann::json read_header_line(std::istream& in, const std::filesystem::path& path,
                                const std::string& magic, int version);

/// Reads exactly `count` floats and requires end-of-file afterwards.
std::vector<float> read_f32_exact(std::istream& in, std::size_t count,
                                  const std::filesystem::path& path);

struct HeaderPayload {
  nlohmann::json header;
  std::vector<float> payload;
};

/// `payload_count(header)` returns the declared float count (and may throw
/// FormatError on inconsistent headers).
template <typename CountFn>
HeaderPayload read_header_payload(const std::filesystem::path& path, const std::string& magic,
                                  int version, CountFn&& payload_count) {
  auto in = open_binary(path);
  HeaderPayload out;
  out.header = read_header_line(in, path, magic, version);
  const std::size_t count = payload_count(out.header);
  out.payload = read_f32_exact(in, count, path);
  return out;
}

/// Fetches a required header key, converting lookup/type errors into FormatError.
template <typename T>
T header_get(const nlohmann::json& header, const char* key) {
  if (!header.contains(key)) throw FormatError(std::string("header is missing key '") + key + "'");
  try {
    return header.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header key '") + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace nifm::io
