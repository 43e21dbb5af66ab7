#pragma once

#include <string>
#include <string_view>

namespace lot {

/// Lower-case hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// SHA-256 of a file's bytes; throws lot::Error if unreadable.
std::string sha256_file(const std::string& path);

}  // namespace lot
