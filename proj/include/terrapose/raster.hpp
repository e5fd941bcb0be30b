#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "terrapose/error.hpp"

namespace terrapose {

/// Dense row-major image. Row 0 is the top of the image.
template <typename T>
struct Raster {
    int width = 0;
    int height = 0;
    std::vector<T> data;

    Raster() = default;
    Raster(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    bool empty() const { return width <= 0 || height <= 0; }
    T& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

using Image = Raster<float>;  // intensities in [0,1]; NaN marks nodata

inline bool is_nodata(float v) { return std::isnan(v); }

/// Bilinear sample with pixel centers at integer coordinates; coordinates
/// are clamped to the raster border.
inline double sample_bilinear(const Image& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
    const int x0 = std::min(static_cast<int>(x), std::max(img.width - 2, 0));
    const int y0 = std::min(static_cast<int>(y), std::max(img.height - 2, 0));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0, fy = y - y0;
    const double a = img.at(x0, y0), b = img.at(x1, y0), c = img.at(x0, y1), d = img.at(x1, y1);
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
}

namespace detail {

inline std::string read_pnm_token(std::istream& in) {
    std::string tok;
    while (in) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    in >> tok;
    return tok;
}

}  // namespace detail

/// Reads binary PGM (P5) or PPM (P6, converted to Rec.601 luminance), 8 or 16 bit.
inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path);
    const std::string magic = detail::read_pnm_token(in);
    if (magic != "P5" && magic != "P6") fail("UnsupportedImage", path + ": expected P5 or P6, got '" + magic + "'");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(detail::read_pnm_token(in));
        h = std::stoi(detail::read_pnm_token(in));
        maxval = std::stoi(detail::read_pnm_token(in));
    } catch (...) {
        fail("UnsupportedImage", path + ": malformed header");
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) fail("UnsupportedImage", path + ": bad dimensions");
    in.get();
    const int channels = magic == "P6" ? 3 : 1;
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * channels * bytes);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) fail("UnsupportedImage", path + ": truncated body");
    Image img(w, h);
    auto value = [&](std::size_t k) -> double {
        if (bytes == 1) return buf[k];
        return (static_cast<unsigned>(buf[2 * k]) << 8) | buf[2 * k + 1];
    };
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        double v;
        if (channels == 1) {
            v = value(i);
        } else {
            v = 0.299 * value(3 * i) + 0.587 * value(3 * i + 1) + 0.114 * value(3 * i + 2);
        }
        img.data[i] = static_cast<float>(v / maxval);
    }
    return img;
}

/// Encodes a 16-bit binary PGM. Nodata pixels are written as 0.
inline std::string encode_pgm16(const Image& img) {
    std::ostringstream out(std::ios::binary);
    out << "P5\n" << img.width << " " << img.height << "\n65535\n";
    for (float f : img.data) {
        double v = is_nodata(f) ? 0.0 : std::clamp(static_cast<double>(f), 0.0, 1.0);
        auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
        out.put(static_cast<char>(q >> 8));
        out.put(static_cast<char>(q & 0xff));
    }
    return out.str();
}

/// Flat little-endian float32 payload; NaN becomes `nodata`.
template <typename T>
std::string encode_float32(const Raster<T>& r, float nodata) {
    std::string out;
    out.resize(r.data.size() * sizeof(float));
    for (std::size_t i = 0; i < r.data.size(); ++i) {
        float f = static_cast<float>(r.data[i]);
        if (std::isnan(f)) f = nodata;
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    return out;
}

inline nlohmann::json float32_sidecar(int width, int height, float nodata) {
    return {{"width", width}, {"height", height}, {"dtype", "float32"}, {"byte_order", "little"}, {"nodata", nodata}};
}

/// Reads a float32 raster written by encode_float32 together with its JSON
/// sidecar (`<path>.json`); nodata values come back as NaN.
inline Raster<float> read_float32(const std::string& path, const std::string& sidecar_path) {
    std::ifstream js(sidecar_path);
    if (!js) fail("IoError", "cannot open " + sidecar_path);
    nlohmann::json meta;
    try {
        js >> meta;
    } catch (const std::exception& e) {
        fail("UnparsableNumber", sidecar_path + ": " + e.what());
    }
    const int w = meta.value("width", 0), h = meta.value("height", 0);
    const float nodata = meta.value("nodata", -9999.0f);
    if (w <= 0 || h <= 0) fail("MissingHeaderKey", sidecar_path + ": width/height");
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path);
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) fail("NonRectangularBody", path + ": truncated");
    Raster<float> r(w, h);
    for (std::size_t i = 0; i < r.data.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        r.data[i] = (f == nodata) ? std::numeric_limits<float>::quiet_NaN() : f;
    }
    return r;
}

}  // namespace terrapose
