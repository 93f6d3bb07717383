// Copyright 2026 The RCD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

// Binary PGM/PPM (P5/P6, 8 or 16 bit) and PFM float images.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#include "rcd/io/bytes.hpp"
#include "rcd/tensor.hpp"

namespace rcd::io {

inline constexpr long kMaxDimension = 1 << 15;

namespace detail {

class HeaderParser {
public:
    explicit HeaderParser(std::string_view data) : data_(data) {}

    std::string token() {
        skip_space_and_comments();
        const std::size_t start = pos_;
        while (pos_ < data_.size() && !std::isspace(static_cast<unsigned char>(data_[pos_]))) ++pos_;
        if (start == pos_) throw FormatError("image header ended early");
        return std::string(data_.substr(start, pos_ - start));
    }

    long integer() {
        const std::string t = token();
        try {
            std::size_t used = 0;
            const long v = std::stol(t, &used);
            if (used != t.size()) throw FormatError("bad number in image header: " + t);
            return v;
        } catch (const std::logic_error&) {
            throw FormatError("bad number in image header: " + t);
        }
    }

    /// Consumes the single whitespace byte separating header and raster.
    std::size_t raster_offset() {
        if (pos_ >= data_.size() || !std::isspace(static_cast<unsigned char>(data_[pos_])))
            throw FormatError("image header is not terminated by whitespace");
        return pos_ + 1;
    }

private:
    void skip_space_and_comments() {
        while (pos_ < data_.size()) {
            if (std::isspace(static_cast<unsigned char>(data_[pos_]))) {
                ++pos_;
            } else if (data_[pos_] == '#') {
                while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes P5 (gray) or P6 (RGB) into [0, 1] intensities, or PF/Pf floats as-is.
inline ImageTensor decode_image(std::string_view data) {
    detail::HeaderParser header(data);
    const std::string magic = header.token();
    if (magic == "PF" || magic == "Pf") {
        const long w = header.integer(), h = header.integer();
        const std::string scale_token = header.token();
        double scale = 0.0;
        try {
            scale = std::stod(scale_token);
        } catch (const std::logic_error&) {
            throw FormatError("bad PFM scale: " + scale_token);
        }
        const std::size_t off = header.raster_offset();
        const std::size_t c = magic == "PF" ? 3 : 1;
        if (w < 1 || h < 1 || w > kMaxDimension || h > kMaxDimension) throw FormatError("bad PFM dimensions");
        if (scale == 0.0 || !std::isfinite(scale)) throw FormatError("PFM scale must be non-zero");
        const std::size_t count = static_cast<std::size_t>(w * h) * c;
        if (data.size() - off < count * 4) throw FormatError("truncated PFM raster");
        ImageTensor img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), c);
        const bool little = scale < 0.0;
        for (long y = 0; y < h; ++y)
            for (std::size_t k = 0; k < static_cast<std::size_t>(w) * c; ++k) {
                const auto* p =
                    reinterpret_cast<const unsigned char*>(data.data() + off +
                                                           (static_cast<std::size_t>(y * w) * c + k) * 4);
                const std::uint32_t bits =
                    little ? (p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24))
                           : (p[3] | (p[2] << 8) | (p[1] << 16) | (static_cast<std::uint32_t>(p[0]) << 24));
                // PFM rows run bottom to top.
                img[(static_cast<std::size_t>(h - 1 - y) * static_cast<std::size_t>(w)) * c + k] =
                    std::bit_cast<float>(bits);
            }
        return img;
    }
    if (magic != "P5" && magic != "P6") throw FormatError("unsupported image type '" + magic + "'");
    const long w = header.integer(), h = header.integer(), maxval = header.integer();
    const std::size_t off = header.raster_offset();
    if (w < 1 || h < 1 || w > kMaxDimension || h > kMaxDimension || maxval < 1 || maxval > 65535)
        throw FormatError("bad PNM header values");
    const std::size_t c = magic == "P6" ? 3 : 1;
    const std::size_t count = static_cast<std::size_t>(w * h) * c;
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (data.size() - off < count * bytes_per) throw FormatError("truncated PNM raster");
    ImageTensor img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), c);
    const auto* p = reinterpret_cast<const unsigned char*>(data.data() + off);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned v = bytes_per == 2 ? (p[2 * i] << 8) | p[2 * i + 1] : p[i];
        img[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
    return img;
}

/// 8-bit (or 16-bit with maxval > 255) PGM/PPM; values are clamped to [0, 1]
/// and rounded.
inline std::string encode_pnm(const ImageTensor& img, unsigned maxval = 255) {
    if (img.channels() != 1 && img.channels() != 3)
        throw ConfigurationError("PNM export needs 1 or 3 channels, image has " + std::to_string(img.channels()));
    std::ostringstream header;
    header << (img.channels() == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << '\n' << maxval << '\n';
    std::string out = header.str();
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(img[i], 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * maxval));
        if (maxval > 255) out.push_back(static_cast<char>(q >> 8));
        out.push_back(static_cast<char>(q & 0xff));
    }
    return out;
}

/// Little-endian PFM; stores values unclamped at 32-bit.
inline std::string encode_pfm(const ImageTensor& img) {
    if (img.channels() != 1 && img.channels() != 3)
        throw ConfigurationError("PFM export needs 1 or 3 channels, image has " + std::to_string(img.channels()));
    std::ostringstream header;
    header << (img.channels() == 3 ? "PF" : "Pf") << '\n' << img.width() << ' ' << img.height() << "\n-1.0\n";
    ByteWriter w;
    w.bytes(header.str());
    const std::size_t row = img.width() * img.channels();
    for (std::size_t y = img.height(); y-- > 0;)
        for (std::size_t k = 0; k < row; ++k) w.f32(static_cast<float>(img[y * row + k]));
    return w.take();
}

inline ImageTensor load_image(const std::string& path) { return decode_image(read_file(path)); }

/// Writes PFM for a ".pfm" path, PNM otherwise.
inline void save_image(const std::string& path, const ImageTensor& img) {
    const bool pfm = path.size() >= 4 && path.compare(path.size() - 4, 4, ".pfm") == 0;
    write_file(path, pfm ? encode_pfm(img) : encode_pnm(img));
}

}  // namespace rcd::io
