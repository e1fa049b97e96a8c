#include "desklm/io.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "desklm/common.hpp"

namespace desklm {

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

struct LineReader::Impl {
    std::FILE* plain = nullptr;
    gzFile gz = nullptr;
    std::string buffer;
    size_t pos = 0;
    bool eof = false;

    ~Impl() {
        if (plain) {
            std::fclose(plain);
        }
        if (gz) {
            gzclose(gz);
        }
    }

    bool fill() {
        char chunk[1 << 16];
        size_t got = 0;
        if (plain) {
            got = std::fread(chunk, 1, sizeof(chunk), plain);
        } else {
            int r = gzread(gz, chunk, sizeof(chunk));
            if (r < 0) {
                return false;
            }
            got = static_cast<size_t>(r);
        }
        if (got == 0) {
            eof = true;
            return false;
        }
        buffer.append(chunk, got);
        return true;
    }
};

LineReader::LineReader(const std::string& path) : impl_(std::make_unique<Impl>()), path_(path) {
    if (has_suffix(path, ".gz")) {
        impl_->gz = gzopen(path.c_str(), "rb");
        if (!impl_->gz) {
            throw IoError("cannot open file: " + path);
        }
    } else {
        impl_->plain = std::fopen(path.c_str(), "rb");
        if (!impl_->plain) {
            throw IoError("cannot open file: " + path);
        }
    }
}

LineReader::~LineReader() = default;

bool LineReader::next(std::string& line) {
    auto& im = *impl_;
    for (;;) {
        size_t nl = im.buffer.find('\n', im.pos);
        if (nl != std::string::npos) {
            line.assign(im.buffer, im.pos, nl - im.pos);
            im.pos = nl + 1;
            if (im.pos > (1u << 20)) {
                im.buffer.erase(0, im.pos);
                im.pos = 0;
            }
            ++line_number_;
            return true;
        }
        if (im.eof) {
            if (im.pos < im.buffer.size()) {
                line.assign(im.buffer, im.pos, im.buffer.size() - im.pos);
                im.pos = im.buffer.size();
                ++line_number_;
                return true;
            }
            return false;
        }
        if (!im.fill() && !im.eof) {
            throw IoError("read error in file: " + path_);
        }
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open file: " + path);
    }
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write file: " + path);
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) {
        throw IoError("cannot create directory: " + path + " (" + ec.message() + ")");
    }
}

}  // namespace desklm
