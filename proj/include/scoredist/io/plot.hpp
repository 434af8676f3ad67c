#pragma once

// Just enough rasterization for report figures: an RGB canvas, polylines,
// and a tiny 3x5 bitmap font for hex hashes and short labels.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scoredist/tensor.hpp"

namespace scoredist {

struct Rgb {
    double r = 0.0, g = 0.0, b = 0.0;
};

class Canvas {
public:
    Canvas(std::size_t width, std::size_t height, Rgb background = {1.0, 1.0, 1.0})
        : w_(width), h_(height), img_({3, height, width}) {
        for (std::size_t y = 0; y < h_; ++y) {
            for (std::size_t x = 0; x < w_; ++x) set(x, y, background);
        }
    }

    std::size_t width() const { return w_; }
    std::size_t height() const { return h_; }
    const Tensor& image() const { return img_; }

    void set(std::size_t x, std::size_t y, Rgb c) {
        if (x >= w_ || y >= h_) return;
        img_[(0 * h_ + y) * w_ + x] = c.r;
        img_[(1 * h_ + y) * w_ + x] = c.g;
        img_[(2 * h_ + y) * w_ + x] = c.b;
    }

    void line(double x0, double y0, double x1, double y1, Rgb c) {
        const double dx = x1 - x0, dy = y1 - y0;
        const int steps = std::max(1, int(std::ceil(std::max(std::abs(dx), std::abs(dy)))));
        for (int i = 0; i <= steps; ++i) {
            const double t = double(i) / double(steps);
            set(std::size_t(std::lround(x0 + t * dx)), std::size_t(std::lround(y0 + t * dy)), c);
        }
    }

    // 3x5 glyphs, doubled to 6x10 pixels per character
    void text(std::size_t x, std::size_t y, const std::string& s, Rgb c) {
        std::size_t cx = x;
        for (char ch : s) {
            const auto it = font_().find(ch);
            if (it != font_().end()) {
                for (int ry = 0; ry < 5; ++ry) {
                    for (int rx = 0; rx < 3; ++rx) {
                        if (it->second[ry] & (4 >> rx)) {
                            for (int sy = 0; sy < 2; ++sy) {
                                for (int sx = 0; sx < 2; ++sx) {
                                    set(cx + 2 * rx + sx, y + 2 * ry + sy, c);
                                }
                            }
                        }
                    }
                }
            }
            cx += 8;
        }
    }

    // embed an image tile ([h,w] gray, [1,h,w] or [3,h,w]) at (x, y)
    void blit(std::size_t x, std::size_t y, const Tensor& tile) {
        std::size_t c = 1, th, tw;
        if (tile.rank() == 2) {
            th = tile.shape()[0];
            tw = tile.shape()[1];
        } else {
            c = tile.shape()[0];
            th = tile.shape()[1];
            tw = tile.shape()[2];
        }
        for (std::size_t ty = 0; ty < th; ++ty) {
            for (std::size_t tx = 0; tx < tw; ++tx) {
                Rgb col;
                if (c == 3) {
                    col = {tile[(0 * th + ty) * tw + tx], tile[(1 * th + ty) * tw + tx],
                           tile[(2 * th + ty) * tw + tx]};
                } else {
                    const double v = tile[(0 * th + ty) * tw + tx];
                    col = {v, v, v};
                }
                col.r = std::clamp(col.r, 0.0, 1.0);
                col.g = std::clamp(col.g, 0.0, 1.0);
                col.b = std::clamp(col.b, 0.0, 1.0);
                set(x + tx, y + ty, col);
            }
        }
    }

private:
    static const std::map<char, std::array<uint8_t, 5>>& font_() {
        static const std::map<char, std::array<uint8_t, 5>> f = {
            {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}},
            {'3', {7, 1, 3, 1, 7}}, {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}},
            {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 2, 2, 2}}, {'8', {7, 5, 7, 5, 7}},
            {'9', {7, 5, 7, 1, 7}}, {'a', {0, 3, 5, 5, 3}}, {'b', {4, 7, 5, 5, 7}},
            {'c', {0, 3, 4, 4, 3}}, {'d', {1, 3, 5, 5, 3}}, {'e', {0, 7, 7, 4, 3}},
            {'f', {3, 2, 7, 2, 2}}, {'r', {0, 5, 6, 4, 4}}, {'u', {0, 5, 5, 5, 3}},
            {'n', {0, 6, 5, 5, 5}}, {':', {0, 2, 0, 2, 0}}, {' ', {0, 0, 0, 0, 0}},
        };
        return f;
    }

    std::size_t w_, h_;
    Tensor img_;
};

// one metric curve per run, drawn into a fresh canvas with axes
inline Canvas plot_curves(const std::vector<std::vector<double>>& series,
                          const std::vector<std::string>& captions, std::size_t width = 480,
                          std::size_t height = 240) {
    Canvas canvas(width, height);
    const double margin = 24.0;
    double lo = 0.0, hi = 1.0;
    bool first = true;
    for (const auto& s : series) {
        for (double v : s) {
            if (!std::isfinite(v)) continue;
            if (first) {
                lo = hi = v;
                first = false;
            }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi <= lo) hi = lo + 1.0;
    canvas.line(margin, margin, margin, height - margin, {0, 0, 0});
    canvas.line(margin, height - margin, width - margin, height - margin, {0, 0, 0});
    static const Rgb palette[4] = {{0.8, 0.1, 0.1}, {0.1, 0.1, 0.8}, {0.1, 0.6, 0.1},
                                   {0.6, 0.1, 0.6}};
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        if (s.size() < 2) continue;
        const Rgb color = palette[k % 4];
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (!std::isfinite(s[i - 1]) || !std::isfinite(s[i])) continue;
            const double x0 = margin + (width - 2 * margin) * double(i - 1) / double(s.size() - 1);
            const double x1 = margin + (width - 2 * margin) * double(i) / double(s.size() - 1);
            const double y0 =
                height - margin - (height - 2 * margin) * (s[i - 1] - lo) / (hi - lo);
            const double y1 = height - margin - (height - 2 * margin) * (s[i] - lo) / (hi - lo);
            canvas.line(x0, y0, x1, y1, color);
        }
        if (k < captions.size()) {
            canvas.text(std::size_t(margin) + 4, 4 + 12 * k, captions[k], color);
        }
    }
    return canvas;
}

}  // namespace scoredist
