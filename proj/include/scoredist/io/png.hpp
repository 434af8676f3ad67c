#pragma once

// Minimal PNG writer/reader over zlib: 8-bit grayscale or RGB,
// non-interlaced. Tensors are [h,w], [1,h,w] or [3,h,w] with values in
// [0,1]; writing clamps, reading scales back to [0,1].

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoredist/tensor.hpp"

namespace scoredist {

namespace detail {

inline void push_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline void push_chunk(std::vector<uint8_t>& out, const char type[4],
                       const std::vector<uint8_t>& payload) {
    push_u32(out, uint32_t(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, uInt(out.size() - start));
    push_u32(out, uint32_t(crc));
}

inline uint32_t read_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

}  // namespace detail

inline std::vector<uint8_t> encode_png(const Tensor& image) {
    std::size_t channels = 1, h = 0, w = 0;
    if (image.rank() == 2) {
        h = image.shape()[0];
        w = image.shape()[1];
    } else if (image.rank() == 3 && (image.shape()[0] == 1 || image.shape()[0] == 3)) {
        channels = image.shape()[0];
        h = image.shape()[1];
        w = image.shape()[2];
    } else {
        throw std::invalid_argument("encode_png: need [h,w], [1,h,w] or [3,h,w]");
    }

    // filter byte 0 per scanline, channel-interleaved samples
    std::vector<uint8_t> raw;
    raw.reserve(h * (w * channels + 1));
    for (std::size_t y = 0; y < h; ++y) {
        raw.push_back(0);
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                double v = image[(c * h + y) * w + x];
                v = std::min(1.0, std::max(0.0, v));
                raw.push_back(uint8_t(std::lround(v * 255.0)));
            }
        }
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK) {
        throw std::runtime_error("encode_png: deflate failed");
    }
    compressed.resize(bound);

    std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<uint8_t> ihdr;
    detail::push_u32(ihdr, uint32_t(w));
    detail::push_u32(ihdr, uint32_t(h));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);              // gray or RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::push_chunk(out, "IHDR", ihdr);
    detail::push_chunk(out, "IDAT", compressed);
    detail::push_chunk(out, "IEND", {});
    return out;
}

inline void save_png(const Tensor& image, const std::string& path) {
    const auto bytes = encode_png(image);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("failed writing " + path);
}

inline Tensor decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) {
        throw std::runtime_error("decode_png: not a PNG file");
    }
    std::size_t pos = 8;
    uint32_t w = 0, h = 0;
    int channels = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = detail::read_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("decode_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = detail::read_u32(payload);
            h = detail::read_u32(payload + 4);
            const uint8_t depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || (color != 0 && color != 2) || interlace != 0) {
                throw std::runtime_error("decode_png: only 8-bit gray/RGB non-interlaced");
            }
            channels = color == 0 ? 1 : 3;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w == 0 || h == 0 || idat.empty()) throw std::runtime_error("decode_png: missing data");

    const std::size_t bpp = std::size_t(channels);
    const std::size_t stride = std::size_t(w) * bpp;
    std::vector<uint8_t> raw(h * (stride + 1));
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size()) {
        throw std::runtime_error("decode_png: inflate failed");
    }

    auto paeth = [](int a, int b, int c) {
        const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
        if (pa <= pb && pa <= pc) return a;
        return pb <= pc ? b : c;
    };
    std::vector<uint8_t> pix(std::size_t(h) * stride, 0);
    for (std::size_t y = 0; y < h; ++y) {
        const uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = raw.data() + y * (stride + 1) + 1;
        uint8_t* dst = pix.data() + y * stride;
        const uint8_t* above = y > 0 ? pix.data() + (y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int left = i >= bpp ? dst[i - bpp] : 0;
            const int up = above ? above[i] : 0;
            const int ul = (above && i >= bpp) ? above[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += up; break;
                case 3: v += (left + up) / 2; break;
                case 4: v += paeth(left, up, ul); break;
                default: throw std::runtime_error("decode_png: bad filter type");
            }
            dst[i] = uint8_t(v & 0xff);
        }
    }

    Tensor out({std::size_t(channels), h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < std::size_t(channels); ++c) {
                out[(c * h + y) * w + x] = double(pix[y * stride + x * bpp + c]) / 255.0;
            }
        }
    }
    return out;
}

inline Tensor load_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

// nearest-neighbour upscale, for making tiny snapshots visible
inline Tensor upscale(const Tensor& image, std::size_t factor) {
    if (factor <= 1) return image;
    std::size_t c = 1, h, w;
    if (image.rank() == 2) {
        h = image.shape()[0];
        w = image.shape()[1];
    } else {
        c = image.shape()[0];
        h = image.shape()[1];
        w = image.shape()[2];
    }
    Tensor out({c, h * factor, w * factor});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h * factor; ++y) {
            for (std::size_t x = 0; x < w * factor; ++x) {
                out[(ch * h * factor + y) * w * factor + x] =
                    image[(ch * h + y / factor) * w + x / factor];
            }
        }
    }
    return out;
}

}  // namespace scoredist
