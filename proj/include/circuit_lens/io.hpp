#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>

#include "circuit_lens/common.hpp"

namespace circuit_lens {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
// Digest of a file, or of a directory's regular files in sorted path order.
std::string sha256_path(const std::filesystem::path& path);

// Writes through a sibling temporary file that is renamed over `path` only
// after `fill` returns and the stream flushed cleanly.
void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fill);
void write_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace circuit_lens
