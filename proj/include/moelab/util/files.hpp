#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace moelab::util {

// SHA-256 of a byte string, lowercase hex.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Opens a file that must not exist yet (IoError otherwise) unless `force`.
std::ofstream create_new(const std::filesystem::path& path, bool force = false,
                         std::ios::openmode mode = std::ios::out);

void write_text(const std::filesystem::path& path, std::string_view text, bool force = false);
std::string read_text(const std::filesystem::path& path);

}  // namespace moelab::util
