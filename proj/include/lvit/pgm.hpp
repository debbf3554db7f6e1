#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace lvit {
namespace pgm {

struct Image {
    int width = 0;
    int height = 0;
    int maxval = 0;
    std::vector<std::uint16_t> samples;  // row-major
};

// Binary portable graymap (P5). Samples are one byte for maxval < 256,
// otherwise two bytes with the most significant byte first.
inline void write(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("pgm: cannot open for writing: " + path);
    f << "P5\n" << img.width << " " << img.height << "\n" << img.maxval << "\n";
    if (img.maxval < 256) {
        for (const std::uint16_t s : img.samples) f.put(static_cast<char>(s & 0xff));
    } else {
        for (const std::uint16_t s : img.samples) {
            f.put(static_cast<char>((s >> 8) & 0xff));
            f.put(static_cast<char>(s & 0xff));
        }
    }
    if (!f) throw std::runtime_error("pgm: write failed: " + path);
}

inline Image read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("pgm: cannot open: " + path);

    auto next_token = [&f, &path]() {
        std::string tok;
        int c = f.get();
        while (c != EOF) {
            if (c == '#') {  // comment to end of line
                while (c != EOF && c != '\n') c = f.get();
            } else if (std::isspace(c)) {
                if (!tok.empty()) break;
            } else {
                tok.push_back(static_cast<char>(c));
            }
            c = f.get();
        }
        if (tok.empty()) throw std::runtime_error("pgm: truncated header: " + path);
        return tok;
    };

    if (next_token() != "P5") throw std::runtime_error("pgm: not a P5 file: " + path);
    Image img;
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    img.maxval = std::stoi(next_token());
    if (img.width <= 0 || img.height <= 0 || img.maxval <= 0 || img.maxval > 65535)
        throw std::runtime_error("pgm: bad header in " + path);

    const size_t n = static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
    img.samples.resize(n);
    if (img.maxval < 256) {
        std::vector<char> buf(n);
        f.read(buf.data(), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(f.gcount()) != n) throw std::runtime_error("pgm: truncated data: " + path);
        for (size_t i = 0; i < n; ++i) img.samples[i] = static_cast<std::uint8_t>(buf[i]);
    } else {
        std::vector<char> buf(2 * n);
        f.read(buf.data(), static_cast<std::streamsize>(2 * n));
        if (static_cast<size_t>(f.gcount()) != 2 * n) throw std::runtime_error("pgm: truncated data: " + path);
        for (size_t i = 0; i < n; ++i)
            img.samples[i] = static_cast<std::uint16_t>((static_cast<std::uint8_t>(buf[2 * i]) << 8) |
                                                        static_cast<std::uint8_t>(buf[2 * i + 1]));
    }
    return img;
}

}  // namespace pgm
}  // namespace lvit
