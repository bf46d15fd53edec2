#include "talktrack/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fstream>

#include "talktrack/error.hpp"

namespace talktrack {

void append_line_synced(const std::filesystem::path& path, std::string_view line) {
  std::string buf(line);
  buf.push_back('\n');
  ensure_parent_dir(path);
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) fail(ErrorKind::kData, "cannot open " + path.string() + " for appending");
  std::size_t done = 0;
  while (done < buf.size()) {
    const auto n = ::write(fd, buf.data() + done, buf.size() - done);
    if (n <= 0) {
      ::close(fd);
      fail(ErrorKind::kData, "short write to " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) fail(ErrorKind::kData, "fsync failed for " + path.string());
}

std::vector<std::string> read_nonblank_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(line);
  return out;
}

void ensure_parent_dir(const std::filesystem::path& path) {
  const auto parent = path.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) fail(ErrorKind::kData, "cannot create directory " + parent.string() + ": " + ec.message());
}

}  // namespace talktrack
