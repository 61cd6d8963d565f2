#pragma once

// Single-file tensor archive: an 8-byte magic, a little-endian u64 header
// length, a JSON header (caller fields plus a tensor manifest of name, shape,
// dtype and byte offset), then the raw little-endian f64 payload.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dehaze/tensor.hpp"

namespace dehaze {

struct Archive {
    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    /// Throws InputError when absent.
    const Tensor& tensor(const std::string& name) const;
};

/// Written to a temporary sibling and renamed, so a crash never leaves a
/// truncated archive behind. Throws IoError.
void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws IoError if unreadable, InputError if malformed.
Archive read_archive(const std::filesystem::path& path);

}  // namespace dehaze
