#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace desklm {

// Sequential line reader over a plain or gzip-compressed text file
// (".gz" suffix selects gzip). Lines are returned without the trailing
// newline and may contain arbitrary bytes.
class LineReader {
   public:
    explicit LineReader(const std::string& path);
    ~LineReader();

    LineReader(const LineReader&) = delete;
    LineReader& operator=(const LineReader&) = delete;

    // false at end of input
    bool next(std::string& line);

    const std::string& path() const { return path_; }
    size_t line_number() const { return line_number_; }

   private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::string path_;
    size_t line_number_ = 0;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
void ensure_dir(const std::string& path);

}  // namespace desklm
