#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvar/graph.hpp"

namespace cvar {

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> px;  // h*w*3

    Image() = default;
    Image(int height, int width) : h(height), w(width), px(static_cast<size_t>(height) * width * 3, 0) {}

    uint8_t* at(int y, int x) { return px.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const uint8_t* at(int y, int x) const { return px.data() + (static_cast<size_t>(y) * w + x) * 3; }

    void set(int y, int x, uint8_t r, uint8_t g, uint8_t b) {
        uint8_t* p = at(y, x);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    bool operator==(const Image& o) const { return h == o.h && w == o.w && px == o.px; }
};

// Continuous [h*w, 3] float view in [0,1]; the layout every tokenizer and
// model routine works in.
template <typename T = float>
Tensor<T> to_float(const Image& img) {
    Tensor<T> t({img.h * img.w, 3});
    for (size_t i = 0; i < img.px.size(); ++i) t.data[i] = static_cast<T>(img.px[i]) / T(255);
    return t;
}

template <typename T>
Image to_image(const Tensor<T>& t, int h, int w) {
    if (t.shape.size() != 2 || t.shape[0] != h * w || t.shape[1] != 3) {
        throw std::invalid_argument("to_image: want [h*w,3] tensor");
    }
    Image img(h, w);
    for (size_t i = 0; i < img.px.size(); ++i) {
        const double v = std::clamp(static_cast<double>(t.data[i]), 0.0, 1.0);
        img.px[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

// Plain (non-recorded) bilinear resample of a [h_in*w_in, c] grid; same
// align-corners-false + edge-clamp convention as the graph op.
template <typename T>
Tensor<T> resample_bilinear(const Tensor<T>& x, int h_in, int w_in, int h_out, int w_out) {
    if (x.shape.size() != 2 || x.shape[0] != h_in * w_in) {
        throw std::invalid_argument("resample_bilinear: bad input shape");
    }
    const int c = x.shape[1];
    const auto taps = Graph<T>::bilinear_taps(h_in, w_in, h_out, w_out);
    Tensor<T> out({h_out * w_out, c});
    for (size_t o = 0; o < taps.size(); ++o) {
        T* yr = out.data.data() + o * c;
        for (const auto& [idx, wgt] : taps[o]) {
            const T* xr = x.data.data() + static_cast<size_t>(idx) * c;
            const T w = static_cast<T>(wgt);
            for (int ch = 0; ch < c; ++ch) yr[ch] += w * xr[ch];
        }
    }
    return out;
}

// ---- PPM (P6, maxval 255), written bit-exactly ----

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    auto next_token = [&f, &path]() {
        std::string tok;
        for (;;) {
            const int ch = f.get();
            if (ch == EOF) throw std::runtime_error("read_ppm: truncated header in " + path);
            if (ch == '#') {
                std::string line;
                std::getline(f, line);
                continue;
            }
            if (std::isspace(ch)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(ch));
        }
    };
    if (next_token() != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("read_ppm: unsupported dimensions/maxval");
    Image img(h, w);
    f.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.px.size())) {
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    }
    return img;
}

}  // namespace cvar
