#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace talktrack {

// Appends one line and fsyncs before returning. Throws ErrorKind::kData.
void append_line_synced(const std::filesystem::path& path, std::string_view line);

// Creates the parent directory of an output file if needed.
void ensure_parent_dir(const std::filesystem::path& path);

// Non-blank lines of a text file. Throws ErrorKind::kData if unreadable.
std::vector<std::string> read_nonblank_lines(const std::filesystem::path& path);

}  // namespace talktrack
