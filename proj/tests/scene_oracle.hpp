#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "expresscount/data.hpp"

// Pixel-level helpers that recover instances straight from rendered images.
namespace expresscount::testing {

inline std::array<int, 3> rgb_of(const std::string& color) {
    static const std::map<std::string, std::array<int, 3>> table = {
        {"red", {220, 40, 40}},     {"green", {40, 180, 60}},  {"blue", {40, 80, 220}},
        {"yellow", {230, 210, 40}}, {"purple", {150, 60, 190}}, {"orange", {240, 140, 30}},
        {"white", {245, 245, 245}}, {"black", {20, 20, 20}},
    };
    return table.at(color);
}

inline std::vector<std::uint8_t> color_mask(const Image& img, const std::string& color) {
    const auto rgb = rgb_of(color);
    std::vector<std::uint8_t> m(static_cast<std::size_t>(img.height) * img.width, 0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            bool hit = true;
            for (int c = 0; c < 3; ++c) hit = hit && std::lround(img.at(y, x, c) * 255.0) == rgb[static_cast<std::size_t>(c)];
            m[static_cast<std::size_t>(y) * img.width + x] = hit;
        }
    return m;
}

struct Component {
    int y0, x0, y1, x1;  // inclusive pixel bounds
    int pixels;
};

// 8-connected components of a binary mask.
inline std::vector<Component> components(const std::vector<std::uint8_t>& mask, int h, int w) {
    std::vector<int> label(mask.size(), -1);
    std::vector<Component> out;
    std::vector<int> stack;
    for (int i = 0; i < h * w; ++i) {
        if (!mask[static_cast<std::size_t>(i)] || label[static_cast<std::size_t>(i)] >= 0) continue;
        Component c{h, w, -1, -1, 0};
        const int id = static_cast<int>(out.size());
        stack.push_back(i);
        label[static_cast<std::size_t>(i)] = id;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int y = p / w, x = p % w;
            c.y0 = std::min(c.y0, y);
            c.x0 = std::min(c.x0, x);
            c.y1 = std::max(c.y1, y);
            c.x1 = std::max(c.x1, x);
            ++c.pixels;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                    const int q = ny * w + nx;
                    if (mask[static_cast<std::size_t>(q)] && label[static_cast<std::size_t>(q)] < 0) {
                        label[static_cast<std::size_t>(q)] = id;
                        stack.push_back(q);
                    }
                }
        }
        out.push_back(c);
    }
    return out;
}

inline BBox component_box(const Component& c, int h, int w) {
    return {static_cast<double>(c.x0) / w, static_cast<double>(c.y0) / h, static_cast<double>(c.y1 - c.y0 + 1) / h,
            static_cast<double>(c.x1 - c.x0 + 1) / w};
}

} // namespace expresscount::testing
