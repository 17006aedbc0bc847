#include "pabn/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pabn/common.hpp"

namespace pabn {

namespace {

struct HeaderParse {
    int w = 0;
    int h = 0;
    std::size_t payload_offset = 0;
};

// Reads "P6 <w> <h> 255" plus the single whitespace byte before the
// payload. '#' starts a comment running to end of line.
HeaderParse parse_ppm_header(const std::string& path, const std::vector<char>& buf) {
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) -> void {
        throw DataError(path + ": " + what);
    };
    auto skip_space = [&]() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') {
                    ++pos;
                }
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> long {
        skip_space();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9') {
            fail("malformed PPM header");
        }
        long v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1000000) {
                fail("PPM dimension out of range");
            }
            ++pos;
        }
        return v;
    };

    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '6') {
        fail("not a P6 PPM file");
    }
    pos = 2;
    HeaderParse hp;
    hp.w = static_cast<int>(read_int());
    hp.h = static_cast<int>(read_int());
    const long maxval = read_int();
    if (hp.w < 1 || hp.h < 1) {
        fail("PPM dimension out of range");
    }
    if (maxval != 255) {
        fail("unsupported PPM maxval " + std::to_string(maxval) + " (only 255)");
    }
    if (pos >= buf.size() || !(buf[pos] == ' ' || buf[pos] == '\t' || buf[pos] == '\r' ||
                              buf[pos] == '\n')) {
        fail("malformed PPM header");
    }
    hp.payload_offset = pos + 1;
    return hp;
}

std::vector<char> read_file(const std::string& path, std::size_t limit) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    std::vector<char> buf;
    buf.resize(limit);
    in.read(buf.data(), static_cast<std::streamsize>(limit));
    buf.resize(static_cast<std::size_t>(in.gcount()));
    return buf;
}

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<char> buf(file_size);
    in.read(buf.data(), static_cast<std::streamsize>(file_size));
    if (static_cast<std::size_t>(in.gcount()) != file_size) {
        throw DataError(path + ": cannot read file");
    }

    const HeaderParse hp = parse_ppm_header(path, buf);
    const std::size_t need = static_cast<std::size_t>(3) * hp.w * hp.h;
    if (buf.size() < hp.payload_offset + need) {
        throw DataError(path + ": truncated PPM payload");
    }
    Image img;
    img.w = hp.w;
    img.h = hp.h;
    img.rgb.resize(need);
    std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>(hp.payload_offset), need,
                reinterpret_cast<char*>(img.rgb.data()));
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.w < 1 || img.h < 1 ||
        img.rgb.size() != static_cast<std::size_t>(3) * img.w * img.h) {
        throw std::invalid_argument("write_ppm: image extents do not match payload");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError(path + ": cannot open file for writing");
    }
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
    if (!out) {
        throw DataError(path + ": write failed");
    }
}

std::pair<int, int> read_ppm_header(const std::string& path) {
    // 4KB covers any sane header; payload size is checked via the file
    // length so indexing never touches pixel data.
    auto buf = read_file(path, 4096);
    const HeaderParse hp = parse_ppm_header(path, buf);

    std::ifstream in(path, std::ios::binary | std::ios::ate);
    const auto file_size = static_cast<std::size_t>(in.tellg());
    const std::size_t need = hp.payload_offset + static_cast<std::size_t>(3) * hp.w * hp.h;
    if (file_size < need) {
        throw DataError(path + ": truncated PPM payload");
    }
    return {hp.w, hp.h};
}

void resize_bilinear_plane(const float* src, int sw, int sh, float* dst, int dw, int dh) {
    const double scale_x = static_cast<double>(sw) / dw;
    const double scale_y = static_cast<double>(sh) / dh;
    for (int dy = 0; dy < dh; ++dy) {
        double sy = (dy + 0.5) * scale_y - 0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const float fy = static_cast<float>(sy - y0);
        const float* r0 = src + static_cast<std::size_t>(y0) * sw;
        const float* r1 = src + static_cast<std::size_t>(y1) * sw;
        float* out = dst + static_cast<std::size_t>(dy) * dw;
        for (int dx = 0; dx < dw; ++dx) {
            double sx = (dx + 0.5) * scale_x - 0.5;
            sx = std::min(std::max(sx, 0.0), static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const float fx = static_cast<float>(sx - x0);
            const float top = r0[x0] + fx * (r0[x1] - r0[x0]);
            const float bot = r1[x0] + fx * (r1[x1] - r1[x0]);
            out[dx] = top + fy * (bot - top);
        }
    }
}

TensorPtr<float> decode_to_tensor(const Image& img, int out_size) {
    if (img.w < 2 || img.h < 2) {
        throw DataError("decode_to_tensor: source must be at least 2x2, got " +
                        std::to_string(img.w) + "x" + std::to_string(img.h));
    }
    auto out = TensorT<float>::create({3, out_size, out_size});
    std::vector<float> plane(static_cast<std::size_t>(img.w) * img.h);
    const std::size_t out_plane = static_cast<std::size_t>(out_size) * out_size;
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane.size(); ++i) {
            plane[i] = static_cast<float>(img.rgb[3 * i + static_cast<std::size_t>(c)]) / 255.0f;
        }
        resize_bilinear_plane(plane.data(), img.w, img.h, out->data.data() + c * out_plane,
                              out_size, out_size);
    }
    return out;
}

}  // namespace pabn
