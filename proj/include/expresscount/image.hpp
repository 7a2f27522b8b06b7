#pragma once

#include <filesystem>
#include <vector>

#include "expresscount/tensor.hpp"

namespace expresscount {

// RGB raster, row-major HWC, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> rgb;

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

    double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    bool empty() const { return rgb.empty(); }
    bool operator==(const Image&) const = default;
};

Image load_image(const std::filesystem::path& path);
// 8-bit PNG (or any extension OpenCV understands). Values are rounded.
void save_image(const Image& image, const std::filesystem::path& path);
// Grayscale export of a [H,W] or [1,H,W] tensor, min/max normalised.
void save_heatmap(const Tensor& map, const std::filesystem::path& path, int upscale = 1);

// Bilinear resampling with half-pixel centres (align_corners = false).
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);
// Resamples the pixel window [y0, y0+h) x [x0, x0+w) to out_h x out_w.
Tensor crop_resize_bilinear(const Tensor& chw, int y0, int x0, int h, int w, int out_h, int out_w);

Tensor image_to_chw(const Image& image);
Image chw_to_image(const Tensor& chw);
Image resize_image(const Image& image, int out_h, int out_w);

// Mean colour per channel.
std::vector<double> mean_color(const Image& image);

// Draws a one-pixel rectangle outline (pixel coordinates, inclusive).
void draw_rectangle(Image& image, int y0, int x0, int y1, int x1, const std::vector<double>& color);

} // namespace expresscount
