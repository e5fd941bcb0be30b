#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "terrapose/error.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/raster.hpp"

namespace terrapose {

/// HOG layout: unsigned orientation bins, square cells, square blocks of
/// cells moved one cell at a time, L2-hys block normalization.
struct HogParams {
    int bins = 9;
    int cell = 8;
    int block = 2;
    double clip = 0.2;
};

/// Per-pixel gradient magnitude and unsigned orientation in [0, pi).
struct GradientField {
    int width = 0;
    int height = 0;
    std::vector<float> magnitude;
    std::vector<float> orientation;
};

/// Separable Gaussian blur; borders replicate, or wrap horizontally.
inline Image gaussian_blur(const Image& img, double sigma, bool wrap_x = false) {
    if (!(sigma > 0)) return img;
    const int rad = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(2 * rad + 1);
    double sum = 0;
    for (int i = -rad; i <= rad; ++i) sum += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    const int w = img.width, h = img.height;
    Image tmp(w, h), out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int i = -rad; i <= rad; ++i) {
                int xx = x + i;
                xx = wrap_x ? (xx % w + w) % w : std::clamp(xx, 0, w - 1);
                s += k[i + rad] * img.at(xx, y);
            }
            tmp.at(x, y) = static_cast<float>(s);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int i = -rad; i <= rad; ++i) s += k[i + rad] * tmp.at(x, std::clamp(y + i, 0, h - 1));
            out.at(x, y) = static_cast<float>(s);
        }
    return out;
}

/// Central differences; borders replicate, or wrap horizontally for
/// 360-degree strips.
inline GradientField compute_gradients(const Image& img, bool wrap_x = false) {
    GradientField g;
    g.width = img.width;
    g.height = img.height;
    g.magnitude.resize(img.data.size());
    g.orientation.resize(img.data.size());
    auto px = [&](int x, int y) {
        if (wrap_x)
            x = (x % img.width + img.width) % img.width;
        else
            x = std::clamp(x, 0, img.width - 1);
        y = std::clamp(y, 0, img.height - 1);
        return static_cast<double>(img.at(x, y));
    };
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double gx = px(x + 1, y) - px(x - 1, y);
            const double gy = px(x, y + 1) - px(x, y - 1);
            double a = std::atan2(gy, gx);
            if (a < 0) a += M_PI;
            if (a >= M_PI) a -= M_PI;
            const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            g.magnitude[i] = static_cast<float>(std::hypot(gx, gy));
            g.orientation[i] = static_cast<float>(a);
        }
    return g;
}

namespace detail {

inline void accumulate_pixel(std::vector<double>& hist, int base, float mag, float ang, int bins) {
    if (mag == 0.0f) return;
    const double pos = ang / M_PI * bins - 0.5;
    int b0 = static_cast<int>(std::floor(pos));
    const double f = pos - b0;
    int b1 = b0 + 1;
    b0 = (b0 % bins + bins) % bins;
    b1 = (b1 % bins + bins) % bins;
    hist[base + b0] += mag * (1.0 - f);
    hist[base + b1] += mag * f;
}

inline void l2hys(std::vector<double>& v, std::size_t begin, std::size_t end, double clip) {
    const double eps2 = 1e-12;
    double n2 = 0;
    for (std::size_t i = begin; i < end; ++i) n2 += v[i] * v[i];
    if (n2 <= eps2) {
        std::fill(v.begin() + begin, v.begin() + end, 0.0);
        return;
    }
    double s = 1.0 / std::sqrt(n2 + eps2);
    n2 = 0;
    for (std::size_t i = begin; i < end; ++i) {
        v[i] = std::min(v[i] * s, clip);
        n2 += v[i] * v[i];
    }
    s = 1.0 / std::sqrt(n2 + eps2);
    for (std::size_t i = begin; i < end; ++i) v[i] *= s;
}

}  // namespace detail

/// Cell histograms for a grid of cells whose top-left corner is at
/// (x0, y0). Pixel access wraps horizontally when `wrap_x`.
struct CellHistograms {
    int cells_x = 0;
    int cells_y = 0;
    int bins = 9;
    std::vector<double> values;  // [cy][cx][bin]

    const double* cell(int cx, int cy) const {
        return values.data() + (static_cast<std::size_t>(cy) * cells_x + cx) * bins;
    }
};

inline CellHistograms cell_histograms(const GradientField& g, int x0, int y0, int cells_x, int cells_y,
                                      const HogParams& p, bool wrap_x = false) {
    CellHistograms h;
    h.cells_x = cells_x;
    h.cells_y = cells_y;
    h.bins = p.bins;
    h.values.assign(static_cast<std::size_t>(cells_x) * cells_y * p.bins, 0.0);
    for (int cy = 0; cy < cells_y; ++cy)
        for (int cx = 0; cx < cells_x; ++cx) {
            const int base = (cy * cells_x + cx) * p.bins;
            for (int dy = 0; dy < p.cell; ++dy) {
                int y = std::clamp(y0 + cy * p.cell + dy, 0, g.height - 1);
                for (int dx = 0; dx < p.cell; ++dx) {
                    int x = x0 + cx * p.cell + dx;
                    x = wrap_x ? (x % g.width + g.width) % g.width : std::clamp(x, 0, g.width - 1);
                    const std::size_t i = static_cast<std::size_t>(y) * g.width + x;
                    detail::accumulate_pixel(h.values, base, g.magnitude[i], g.orientation[i], p.bins);
                }
            }
        }
    return h;
}

/// Block-normalized descriptor over cells [cx0, cx0 + ncx) x [cy0, cy0 + ncy)
/// of a histogram grid; cell x indices wrap when `wrap_x`.
inline std::vector<double> blocks_descriptor(const CellHistograms& h, int cx0, int cy0, int ncx, int ncy,
                                             const HogParams& p, bool wrap_x = false) {
    const int bx = ncx - p.block + 1, by = ncy - p.block + 1;
    const std::size_t block_len = static_cast<std::size_t>(p.block) * p.block * p.bins;
    std::vector<double> d(static_cast<std::size_t>(std::max(bx, 0)) * std::max(by, 0) * block_len, 0.0);
    std::size_t k = 0;
    for (int j = 0; j < by; ++j)
        for (int i = 0; i < bx; ++i) {
            const std::size_t begin = k;
            for (int dj = 0; dj < p.block; ++dj)
                for (int di = 0; di < p.block; ++di) {
                    int cx = cx0 + i + di;
                    if (wrap_x) cx = (cx % h.cells_x + h.cells_x) % h.cells_x;
                    const double* c = h.cell(cx, cy0 + j + dj);
                    for (int b = 0; b < p.bins; ++b) d[k++] = c[b];
                }
            detail::l2hys(d, begin, k, p.clip);
        }
    return d;
}

/// HOG of a w x h patch with top-left corner (x0, y0); w and h must be
/// multiples of the cell size.
inline std::vector<double> hog_descriptor(const GradientField& g, int x0, int y0, int w, int h,
                                          const HogParams& p = {}) {
    if (w % p.cell || h % p.cell || w / p.cell < p.block || h / p.cell < p.block)
        fail("InvalidPatch", "patch size must be a multiple of the cell size and hold one block");
    const auto cells = cell_histograms(g, x0, y0, w / p.cell, h / p.cell, p);
    return blocks_descriptor(cells, 0, 0, cells.cells_x, cells.cells_y, p);
}

/// Pearson correlation of two descriptors; 0 when either is constant
/// (e.g. the all-zero descriptor of a uniform patch).
inline double descriptor_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) fail("DescriptorMismatch", "descriptor lengths differ");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 1e-300 || sbb <= 1e-300) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Mean-centers and scales to unit norm so that correlation becomes a dot
/// product; constant vectors become all zeros.
inline void standardize(std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double n2 = 0;
    for (auto& x : v) {
        x -= m;
        n2 += x * x;
    }
    if (n2 <= 1e-300) {
        std::fill(v.begin(), v.end(), 0.0);
        return;
    }
    const double s = 1.0 / std::sqrt(n2);
    for (auto& x : v) x *= s;
}

// ---------------------------------------------------------------------------
// Corner detection

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double response = 0.0;
    std::vector<double> descriptor;
};

struct DetectorParams {
    std::vector<int> scales{16, 32};  // patch sizes, multiples of 16
    double response_threshold = 1e-4;
    double harris_k = 0.04;
    double window_sigma = 1.0;
    int max_keypoints = 2000;
    HogParams hog;
};

/// Harris corner response with a Gaussian-weighted structure tensor.
inline Raster<double> harris_response(const Image& img, double k, double sigma) {
    const int w = img.width, h = img.height;
    Raster<double> ixx(w, h), iyy(w, h), ixy(w, h);
    auto px = [&](int x, int y) {
        return static_cast<double>(img.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)));
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
            const double gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
            ixx.at(x, y) = gx * gx;
            iyy.at(x, y) = gy * gy;
            ixy.at(x, y) = gx * gy;
        }
    const int rad = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> kern(2 * rad + 1);
    for (int i = -rad; i <= rad; ++i) kern[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    auto blur = [&](Raster<double>& r) {
        Raster<double> tmp(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0;
                for (int i = -rad; i <= rad; ++i) s += kern[i + rad] * r.at(std::clamp(x + i, 0, w - 1), y);
                tmp.at(x, y) = s;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0;
                for (int i = -rad; i <= rad; ++i) s += kern[i + rad] * tmp.at(x, std::clamp(y + i, 0, h - 1));
                r.at(x, y) = s;
            }
    };
    blur(ixx);
    blur(iyy);
    blur(ixy);
    Raster<double> resp(w, h);
    for (std::size_t i = 0; i < resp.data.size(); ++i) {
        const double a = ixx.data[i], b = iyy.data[i], c = ixy.data[i];
        resp.data[i] = a * b - c * c - k * (a + b) * (a + b);
    }
    return resp;
}

/// Extracts a size x size patch centered on (cx, cy), replicating borders.
inline Image extract_patch(const Image& img, int cx, int cy, int size) {
    Image p(size, size);
    const int x0 = cx - size / 2, y0 = cy - size / 2;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            p.at(x, y) = img.at(std::clamp(x0 + x, 0, img.width - 1), std::clamp(y0 + y, 0, img.height - 1));
    return p;
}

/// Multi-scale HOG descriptor centered on a pixel, L2-normalized overall.
inline std::vector<double> describe_point(const Image& img, int x, int y, const DetectorParams& p) {
    std::vector<double> d;
    for (int s : p.scales) {
        const Image patch = extract_patch(img, x, y, s);
        const auto g = compute_gradients(patch);
        const auto part = hog_descriptor(g, 0, 0, s, s, p.hog);
        d.insert(d.end(), part.begin(), part.end());
    }
    double n = 0;
    for (double v : d) n += v * v;
    if (n > 0)
        for (auto& v : d) v /= std::sqrt(n);
    return d;
}

/// Harris maxima above the threshold (3x3 non-maximum suppression), strongest
/// first, each with a multi-scale HOG descriptor.
inline std::vector<Keypoint> detect_and_describe(const Image& img, const DetectorParams& p = {}) {
    if (p.scales.empty()) fail("InvalidPatch", "at least one scale required");
    const int largest = *std::max_element(p.scales.begin(), p.scales.end());
    for (int s : p.scales)
        if (s <= 0 || s % (p.hog.cell * p.hog.block)) fail("InvalidPatch", "scales must be multiples of 16");
    if (img.width <= largest || img.height <= largest)
        fail("RasterTooSmall", "raster must be larger than the largest patch");
    const auto resp = harris_response(img, p.harris_k, p.window_sigma);
    std::vector<Keypoint> kps;
    for (int y = 1; y + 1 < img.height; ++y)
        for (int x = 1; x + 1 < img.width; ++x) {
            const double r = resp.at(x, y);
            if (!(r > p.response_threshold)) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    const double o = resp.at(x + dx, y + dy);
                    // plateau ties resolve to the first pixel in raster order
                    if (o > r || (o == r && (dy < 0 || (dy == 0 && dx < 0)))) {
                        is_max = false;
                        break;
                    }
                }
            if (is_max) kps.push_back({static_cast<double>(x), static_cast<double>(y), r, {}});
        }
    if (kps.empty()) fail("NoKeypoints", "no corner response above threshold");
    std::stable_sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) { return a.response > b.response; });
    if (static_cast<int>(kps.size()) > p.max_keypoints) kps.resize(static_cast<std::size_t>(p.max_keypoints));
    parallel_for(0, kps.size(), [&](std::size_t i) {
        kps[i].descriptor = describe_point(img, static_cast<int>(kps[i].x), static_cast<int>(kps[i].y), p);
    });
    return kps;
}

}  // namespace terrapose
