#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cda/core/rng.hpp"
#include "cda/io/cdaf.hpp"
#include "cda/io/png.hpp"

using namespace cda;
namespace fs = std::filesystem;

TEST_CASE("cdaf round-trip is byte-exact") {
    std::vector<float> px(32 * 24);
    Rng rng(5);
    for (auto& v : px) v = float(rng.normal());

    auto path = (fs::temp_directory_path() / "t.cdaf").string();
    write_cdaf(path, px, 24, 32);

    // header layout is pinned: magic + uint16 H + uint16 W little-endian
    std::ifstream f(path, std::ios::binary);
    char hdr[8];
    f.read(hdr, 8);
    REQUIRE(hdr[0] == 'C');
    REQUIRE(hdr[3] == '1');
    REQUIRE((unsigned char)hdr[4] == 24);
    REQUIRE((unsigned char)hdr[6] == 32);
    f.close();

    int h = 0, w = 0;
    auto back = read_cdaf(path, h, w);
    REQUIRE(h == 24);
    REQUIRE(w == 32);
    REQUIRE(back == px);
    fs::remove(path);
}

TEST_CASE("cdaf rejects bad input") {
    auto path = (fs::temp_directory_path() / "bad.cdaf").string();
    std::ofstream(path, std::ios::binary) << "NOPE";
    int h, w;
    REQUIRE_THROWS_AS(read_cdaf(path, h, w), IoError);
    REQUIRE_THROWS_AS(write_cdaf(path, std::vector<float>(5), 2, 2), IoError);
    fs::remove(path);
}

TEST_CASE("16-bit grayscale png round-trip") {
    std::vector<uint16_t> px(40 * 30);
    Rng rng(6);
    for (auto& v : px) v = uint16_t(rng.uniform_int(65536));
    auto path = (fs::temp_directory_path() / "t16.png").string();
    write_png_gray16(path, px, 30, 40);
    int h = 0, w = 0;
    auto back = read_png_gray16(path, h, w);
    REQUIRE(h == 30);
    REQUIRE(w == 40);
    REQUIRE(back == px);
    fs::remove(path);
}

TEST_CASE("8-bit mask png round-trip") {
    std::vector<uint8_t> px(16 * 16);
    for (size_t i = 0; i < px.size(); ++i) px[i] = uint8_t(i % 3);
    auto path = (fs::temp_directory_path() / "m8.png").string();
    write_png_gray8(path, px, 16, 16);
    int h = 0, w = 0;
    auto back = read_png_gray8(path, h, w);
    REQUIRE(back == px);
    fs::remove(path);
}

TEST_CASE("rgb png writes") {
    std::vector<uint8_t> px(8 * 8 * 3, 100);
    auto path = (fs::temp_directory_path() / "rgb.png").string();
    write_png_rgb8(path, px, 8, 8);
    REQUIRE(fs::file_size(path) > 0);
    fs::remove(path);
}
