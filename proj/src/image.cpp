#include "expresscount/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/imgcodecs.hpp>

#include "expresscount/errors.hpp"

namespace expresscount {

Image load_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw load_error("cannot read image " + path.string());
    Image img(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x][2 - c] / 255.0;
    }
    return img;
}

void save_image(const Image& image, const std::filesystem::path& path) {
    cv::Mat bgr(image.height, image.width, CV_8UC3);
    for (int y = 0; y < image.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255.0));
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) throw io_error("cannot write image " + path.string());
}

void save_heatmap(const Tensor& map, const std::filesystem::path& path, int upscale) {
    XC_EXPECT(map.rank() == 2 || (map.rank() == 3 && map.dim(0) == 1), "heatmap must be [H,W] or [1,H,W]");
    const int h = map.dim(-2);
    const int w = map.dim(-1);
    const auto [lo_it, hi_it] = std::minmax_element(map.data.begin(), map.data.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    cv::Mat gray(h * upscale, w * upscale, CV_8UC1);
    for (int y = 0; y < h * upscale; ++y)
        for (int x = 0; x < w * upscale; ++x) {
            const double v = map.data[static_cast<std::size_t>(y / upscale) * w + x / upscale];
            gray.at<unsigned char>(y, x) = static_cast<unsigned char>(span > 0 ? std::lround(255.0 * (v - lo) / span) : 0);
        }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), gray)) throw io_error("cannot write image " + path.string());
}

Tensor crop_resize_bilinear(const Tensor& chw, int y0, int x0, int h, int w, int out_h, int out_w) {
    XC_EXPECT(chw.rank() == 3, "resize expects [C,H,W]");
    XC_EXPECT(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize needs positive sizes");
    const int C = chw.dim(0);
    const int H = chw.dim(1);
    const int W = chw.dim(2);
    XC_EXPECT(y0 >= 0 && x0 >= 0 && y0 + h <= H && x0 + w <= W, "crop window outside the image");
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;

    struct Tap {
        int i0, i1;
        double f;
    };
    auto taps = [](int n_out, double scale, int origin, int len) {
        std::vector<Tap> t(static_cast<std::size_t>(n_out));
        for (int o = 0; o < n_out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(len - 1));
            const int i0 = static_cast<int>(std::floor(src));
            const int i1 = std::min(i0 + 1, len - 1);
            t[static_cast<std::size_t>(o)] = {origin + i0, origin + i1, src - i0};
        }
        return t;
    };
    const auto ty = taps(out_h, sy, y0, h);
    const auto tx = taps(out_w, sx, x0, w);
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[static_cast<std::size_t>(ox)];
                const double top = chw.at(c, a.i0, b.i0) * (1 - b.f) + chw.at(c, a.i0, b.i1) * b.f;
                const double bot = chw.at(c, a.i1, b.i0) * (1 - b.f) + chw.at(c, a.i1, b.i1) * b.f;
                out.at(c, oy, ox) = top * (1 - a.f) + bot * a.f;
            }
        }
    return out;
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
    return crop_resize_bilinear(chw, 0, 0, chw.dim(1), chw.dim(2), out_h, out_w);
}

Tensor image_to_chw(const Image& image) {
    Tensor t({3, image.height, image.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x) t.at(c, y, x) = image.at(y, x, c);
    return t;
}

Image chw_to_image(const Tensor& chw) {
    XC_EXPECT(chw.rank() == 3 && chw.dim(0) == 3, "expected a [3,H,W] tensor");
    Image img(chw.dim(1), chw.dim(2));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) img.at(y, x, c) = chw.at(c, y, x);
    return img;
}

Image resize_image(const Image& image, int out_h, int out_w) {
    if (image.height == out_h && image.width == out_w) return image;
    return chw_to_image(resize_bilinear(image_to_chw(image), out_h, out_w));
}

std::vector<double> mean_color(const Image& image) {
    std::vector<double> m(3, 0.0);
    const double n = static_cast<double>(image.height) * image.width;
    if (n == 0) return m;
    for (std::size_t i = 0; i < image.rgb.size(); ++i) m[i % 3] += image.rgb[i];
    for (auto& v : m) v /= n;
    return m;
}

void draw_rectangle(Image& image, int y0, int x0, int y1, int x1, const std::vector<double>& color) {
    y0 = std::clamp(y0, 0, image.height - 1);
    y1 = std::clamp(y1, 0, image.height - 1);
    x0 = std::clamp(x0, 0, image.width - 1);
    x1 = std::clamp(x1, 0, image.width - 1);
    for (int x = x0; x <= x1; ++x)
        for (int c = 0; c < 3; ++c) {
            image.at(y0, x, c) = color[static_cast<std::size_t>(c)];
            image.at(y1, x, c) = color[static_cast<std::size_t>(c)];
        }
    for (int y = y0; y <= y1; ++y)
        for (int c = 0; c < 3; ++c) {
            image.at(y, x0, c) = color[static_cast<std::size_t>(c)];
            image.at(y, x1, c) = color[static_cast<std::size_t>(c)];
        }
}

} // namespace expresscount
