#pragma once

// Flat float image format used for synthetic data, byte-exact:
//   offset 0: magic "CDA1" (4 bytes)
//   offset 4: height, uint16 little-endian
//   offset 6: width,  uint16 little-endian
//   offset 8: height*width float32 little-endian, row-major
// Total size = 8 + 4*H*W bytes.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cda {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("IoError: " + msg) {}
};

inline void write_cdaf(const std::string& path, const std::vector<float>& pixels, int height,
                       int width) {
    if ((long)pixels.size() != (long)height * width) throw IoError("cdaf: pixel count mismatch");
    if (height <= 0 || width <= 0 || height > 65535 || width > 65535)
        throw IoError("cdaf: dimensions out of range for " + path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    char header[8] = {'C', 'D', 'A', '1', 0, 0, 0, 0};
    header[4] = char(height & 0xff);
    header[5] = char((height >> 8) & 0xff);
    header[6] = char(width & 0xff);
    header[7] = char((width >> 8) & 0xff);
    f.write(header, 8);
    f.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size() * 4));
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<float> read_cdaf(const std::string& path, int& height, int& width) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char header[8];
    f.read(header, 8);
    if (!f || std::memcmp(header, "CDA1", 4) != 0) throw IoError("bad cdaf header: " + path);
    height = (unsigned char)header[4] | ((unsigned char)header[5] << 8);
    width = (unsigned char)header[6] | ((unsigned char)header[7] << 8);
    std::vector<float> pixels(size_t(height) * width);
    f.read(reinterpret_cast<char*>(pixels.data()), std::streamsize(pixels.size() * 4));
    if (!f) throw IoError("truncated cdaf: " + path);
    return pixels;
}

}  // namespace cda
