// Shared framing for the binary containers: a little-endian uint32 header
// length, a UTF-8 JSON header, then raw little-endian value blocks.
// nlohmann::json keeps object keys sorted, so headers are byte-deterministic.

#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace uivim::io {

static_assert(std::endian::native == std::endian::little,
              "file containers assume a little-endian host");

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path);
    }

    void header(const nlohmann::json& j) {
        const std::string s = j.dump();
        const uint32_t len = static_cast<uint32_t>(s.size());
        out_.write(reinterpret_cast<const char*>(&len), 4);
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    template <typename T>
    void block(const std::vector<T>& v) {
        out_.write(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::streamsize>(v.size() * sizeof(T)));
    }

    void finish(const std::string& path) {
        out_.flush();
        if (!out_) throw std::runtime_error("write failed: " + path);
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw std::runtime_error("cannot open: " + path);
    }

    nlohmann::json header(const std::string& expected_magic) {
        uint32_t len = 0;
        in_.read(reinterpret_cast<char*>(&len), 4);
        if (!in_ || len == 0 || len > (64u << 20))
            throw std::runtime_error("corrupt header in " + path_);
        std::string s(len, '\0');
        in_.read(s.data(), len);
        if (!in_) throw std::runtime_error("truncated header in " + path_);
        nlohmann::json j = nlohmann::json::parse(s);
        if (j.value("magic", "") != expected_magic)
            throw std::runtime_error(path_ + ": expected magic " + expected_magic);
        return j;
    }

    template <typename T>
    std::vector<T> block(size_t count) {
        std::vector<T> v(count);
        in_.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(count * sizeof(T)));
        if (!in_) throw std::runtime_error("truncated data block in " + path_);
        return v;
    }

private:
    std::ifstream in_;
    std::string path_;
};

// Peek at the magic of a container file without consuming it.
std::string sniff_magic(const std::string& path);

}  // namespace uivim::io
