#pragma once

// Netpbm (PGM/PPM, ASCII and binary) reading and writing, luma conversion and
// bilinear resizing. Pixel values are held as doubles in [0,1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hvad/errors.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;   // 1 or 3
    std::vector<double> pixels;  // row-major, interleaved channels

    double at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

class NetpbmParser {
public:
    NetpbmParser(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    Image parse() {
        if (bytes_.size() < 2 || bytes_[0] != 'P') fail("not a netpbm file");
        const char kind = bytes_[1];
        if (kind != '2' && kind != '3' && kind != '5' && kind != '6') fail(std::string("unsupported netpbm type P") + kind);
        pos_ = 2;
        Image img;
        img.channels = (kind == '3' || kind == '6') ? 3 : 1;
        img.width = next_uint();
        img.height = next_uint();
        const std::size_t maxval = next_uint();
        if (img.width == 0 || img.height == 0) fail("zero image dimension");
        if (maxval == 0 || maxval > 65535) fail("maxval out of range");
        const std::size_t count = img.width * img.height * img.channels;
        img.pixels.resize(count);
        const double scale = 1.0 / static_cast<double>(maxval);
        if (kind == '2' || kind == '3') {
            for (auto& p : img.pixels) p = sample(next_uint(), maxval) * scale;
        } else {
            ++pos_;  // the single whitespace byte after maxval
            const std::size_t bps = maxval < 256 ? 1 : 2;
            if (bytes_.size() < pos_ + count * bps) fail("truncated pixel data");
            const auto* u = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t v = bps == 1 ? u[i] : (std::size_t{u[2 * i]} << 8) | u[2 * i + 1];
                img.pixels[i] = sample(v, maxval) * scale;
            }
        }
        return img;
    }

private:
    [[noreturn]] void fail(const std::string& why) const { throw IngestionError(path_ + ": " + why); }

    double sample(std::size_t v, std::size_t maxval) const {
        if (v > maxval) fail("sample exceeds maxval");
        return static_cast<double>(v);
    }

    void skip_space() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t next_uint() {
        skip_space();
        if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) fail("malformed header or data");
        std::size_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
            if (v > (1u << 30)) fail("number too large");
        }
        return v;
    }

    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline Image read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError(path.string() + ": cannot open image");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return detail::NetpbmParser(std::move(bytes), path.string()).parse();
}

/// Writes a binary 8-bit PGM; values are clamped to [0,1] and rounded.
inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<double>& gray) {
    if (gray.size() != width * height) throw ConfigError("write_pgm: pixel count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError(path.string() + ": cannot write image");
    out << "P5\n" << width << ' ' << height << "\n255\n";
    std::string row(gray.size(), '\0');
    for (std::size_t i = 0; i < gray.size(); ++i) {
        row[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(gray[i], 0.0, 1.0) * 255.0)));
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
    if (!out) throw IngestionError(path.string() + ": write failed");
}

inline Image to_luma(const Image& img) {
    if (img.channels == 1) return img;
    Image g{img.width, img.height, 1, std::vector<double>(img.width * img.height)};
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
        const double* p = img.pixels.data() + 3 * i;
        g.pixels[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
    return g;
}

/// Bilinear resampling with pixel centres at half-integer coordinates and
/// edge clamping. Same-size input is returned unchanged.
inline Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
    if (img.width == width && img.height == height) return img;
    Image out{width, height, img.channels, std::vector<double>(width * height * img.channels)};
    const double sx = static_cast<double>(img.width) / width, sy = static_cast<double>(img.height) / height;
    auto coord = [](std::size_t d, double scale, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
        const double s = std::clamp((d + 0.5) * scale - 0.5, 0.0, static_cast<double>(n - 1));
        i0 = static_cast<std::size_t>(s);
        i1 = std::min(i0 + 1, n - 1);
        f = s - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < height; ++y) {
        std::size_t y0, y1;
        double fy;
        coord(y, sy, img.height, y0, y1, fy);
        for (std::size_t x = 0; x < width; ++x) {
            std::size_t x0, x1;
            double fx;
            coord(x, sx, img.width, x0, x1, fx);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
                const double bottom = (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
                out.pixels[(y * width + x) * img.channels + c] = (1 - fy) * top + fy * bottom;
            }
        }
    }
    return out;
}

/// Gray frame in [0,1], shape [H,W,1].
template <class T = float>
Tensor<T> load_frame(const std::filesystem::path& path, std::size_t width, std::size_t height) {
    const Image g = resize_bilinear(to_luma(read_netpbm(path)), width, height);
    Tensor<T> out(Shape{height, width, 1});
    for (std::size_t i = 0; i < g.pixels.size(); ++i) out[i] = static_cast<T>(std::clamp(g.pixels[i], 0.0, 1.0));
    return out;
}

}  // namespace hvad
