#include "matir/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace matir {

ImagePlane ImagePlane::create(int64_t w, int64_t h, int64_t c, uint8_t fill) {
    if (w < 1 || h < 1 || (c != 1 && c != 3)) throw ContractError("invalid image dimensions");
    ImagePlane img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.pixels.assign(static_cast<size_t>(w * h * c), fill);
    return img;
}

// ---------------------------------------------------------------------------
// PNG (8-bit, non-interlaced) on top of zlib.
// ---------------------------------------------------------------------------

namespace {

uint32_t be32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void put_be32(std::vector<unsigned char>& v, uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

std::vector<unsigned char> zlib_inflate(const std::vector<unsigned char>& in, size_t expected) {
    std::vector<unsigned char> out(expected);
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit(&zs) != Z_OK) throw FormatError("zlib init failed");
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.avail_out != 0) throw FormatError("PNG image data is corrupt");
    return out;
}

std::vector<unsigned char> zlib_deflate(const std::vector<unsigned char>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<unsigned char> out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK) {
        throw IoError("zlib compression failed");
    }
    out.resize(bound);
    return out;
}

ImagePlane read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    unsigned char sig[8];
    is.read(reinterpret_cast<char*>(sig), 8);
    static const unsigned char kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (!is || std::memcmp(sig, kSig, 8) != 0) throw FormatError("'" + path + "' is not a PNG file");

    int64_t w = 0, h = 0;
    int color_type = -1;
    std::vector<unsigned char> idat;
    bool saw_end = false;
    while (!saw_end) {
        unsigned char hdr[8];
        is.read(reinterpret_cast<char*>(hdr), 8);
        if (!is) throw FormatError("PNG truncated in '" + path + "'");
        const uint32_t len = be32(hdr);
        const std::string type(reinterpret_cast<char*>(hdr + 4), 4);
        std::vector<unsigned char> payload(len);
        if (len) {
            is.read(reinterpret_cast<char*>(payload.data()), len);
            if (!is) throw FormatError("PNG truncated in '" + path + "'");
        }
        is.ignore(4);  // CRC; integrity errors surface as inflate failures
        if (type == "IHDR") {
            if (len != 13) throw FormatError("bad PNG header");
            w = be32(payload.data());
            h = be32(payload.data() + 4);
            const int bit_depth = payload[8];
            color_type = payload[9];
            if (bit_depth != 8) throw FormatError("only 8-bit PNG is supported");
            if (payload[12] != 0) throw FormatError("interlaced PNG is not supported");
            if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6) {
                throw FormatError("unsupported PNG color type " + std::to_string(color_type));
            }
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload.begin(), payload.end());
        } else if (type == "IEND") {
            saw_end = true;
        }
    }
    if (w < 1 || h < 1 || idat.empty()) throw FormatError("PNG missing image data");

    const int64_t src_ch = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 4 ? 2 : 4;
    const int64_t stride = w * src_ch;
    std::vector<unsigned char> raw =
        zlib_inflate(idat, static_cast<size_t>(h * (stride + 1)));

    // Undo per-row filters in place.
    std::vector<unsigned char> prev(static_cast<size_t>(stride), 0);
    std::vector<unsigned char> row(static_cast<size_t>(stride));
    const int64_t out_ch = (src_ch == 1 || src_ch == 2) ? 1 : 3;
    ImagePlane img = ImagePlane::create(w, h, out_ch);
    for (int64_t y = 0; y < h; ++y) {
        const unsigned char* src = raw.data() + y * (stride + 1);
        const int filter = src[0];
        for (int64_t x = 0; x < stride; ++x) {
            const int cur = src[1 + x];
            const int left = x >= src_ch ? row[static_cast<size_t>(x - src_ch)] : 0;
            const int up = prev[static_cast<size_t>(x)];
            const int ul = x >= src_ch ? prev[static_cast<size_t>(x - src_ch)] : 0;
            int v;
            switch (filter) {
                case 0: v = cur; break;
                case 1: v = cur + left; break;
                case 2: v = cur + up; break;
                case 3: v = cur + (left + up) / 2; break;
                case 4: v = cur + paeth(left, up, ul); break;
                default: throw FormatError("bad PNG filter type");
            }
            row[static_cast<size_t>(x)] = static_cast<unsigned char>(v & 0xff);
        }
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < out_ch; ++c) {
                img.at(y, x, c) = row[static_cast<size_t>(x * src_ch + c)];
            }
        }
        std::swap(prev, row);
    }
    return img;
}

void write_chunk(std::ofstream& os, const char* type, const std::vector<unsigned char>& payload) {
    std::vector<unsigned char> head;
    put_be32(head, static_cast<uint32_t>(payload.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!payload.empty()) {
        os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    }
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
    std::vector<unsigned char> tail;
    put_be32(tail, static_cast<uint32_t>(crc));
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

void write_png(const std::string& path, const ImagePlane& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    static const unsigned char kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    os.write(reinterpret_cast<const char*>(kSig), 8);

    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<uint32_t>(img.width));
    put_be32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);                                      // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);              // gray or RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);                                      // no interlace
    write_chunk(os, "IHDR", ihdr);

    const int64_t stride = img.width * img.channels;
    std::vector<unsigned char> raw(static_cast<size_t>(img.height * (stride + 1)));
    for (int64_t y = 0; y < img.height; ++y) {
        unsigned char* dst = raw.data() + y * (stride + 1);
        dst[0] = 0;  // filter: none
        std::memcpy(dst + 1, img.pixels.data() + y * stride, static_cast<size_t>(stride));
    }
    write_chunk(os, "IDAT", zlib_deflate(raw));
    write_chunk(os, "IEND", {});
    if (!os) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Binary PPM (P6) / PGM (P5).
// ---------------------------------------------------------------------------

int next_pnm_token(std::istream& is, std::string& tok) {
    tok.clear();
    int c = is.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        }
        c = is.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = is.get();
    }
    return tok.empty() ? EOF : 0;
}

ImagePlane read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string tok;
    if (next_pnm_token(is, tok) == EOF) throw FormatError("empty PNM file '" + path + "'");
    int64_t channels;
    if (tok == "P6") channels = 3;
    else if (tok == "P5") channels = 1;
    else throw FormatError("'" + path + "' is not a binary PPM/PGM file");
    if (next_pnm_token(is, tok) == EOF) throw FormatError("PNM header truncated");
    const int64_t w = std::stoll(tok);
    if (next_pnm_token(is, tok) == EOF) throw FormatError("PNM header truncated");
    const int64_t h = std::stoll(tok);
    if (next_pnm_token(is, tok) == EOF) throw FormatError("PNM header truncated");
    if (std::stoll(tok) != 255) throw FormatError("PNM maxval must be 255");
    ImagePlane img = ImagePlane::create(w, h, channels);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw FormatError("PNM pixel data truncated in '" + path + "'");
    }
    return img;
}

void write_pnm(const std::string& path, const ImagePlane& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw IoError("write failed for '" + path + "'");
}

std::string lower_ext(const std::string& path) {
    const size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

}  // namespace

ImagePlane read_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    ImagePlane img;
    if (ext == "png") img = read_png(path);
    else if (ext == "ppm" || ext == "pgm") img = read_pnm(path);
    else throw FormatError("unsupported image extension '." + ext + "' (expected png, ppm or pgm)");
    if (!img.valid()) throw FormatError("decoded image is malformed: '" + path + "'");
    return img;
}

void write_image(const std::string& path, const ImagePlane& img) {
    if (!img.valid()) throw ContractError("refusing to write a malformed image");
    const std::string ext = lower_ext(path);
    if (ext == "png") write_png(path, img);
    else if (ext == "ppm" || ext == "pgm") write_pnm(path, img);
    else throw FormatError("unsupported image extension '." + ext + "' (expected png, ppm or pgm)");
}

Tensor image_to_tensor(const ImagePlane& img) {
    if (!img.valid()) throw ContractError("invalid image");
    std::vector<double> v(static_cast<size_t>(img.channels * img.height * img.width));
    for (int64_t c = 0; c < img.channels; ++c)
        for (int64_t y = 0; y < img.height; ++y)
            for (int64_t x = 0; x < img.width; ++x)
                v[static_cast<size_t>((c * img.height + y) * img.width + x)] =
                    static_cast<double>(img.at(y, x, c)) / 255.0;
    return Tensor::from({img.channels, img.height, img.width}, std::move(v));
}

Tensor image_to_tensor3(const ImagePlane& img) {
    if (img.channels == 3) return image_to_tensor(img);
    Tensor g = image_to_tensor(img);
    std::vector<double> v;
    v.reserve(static_cast<size_t>(3 * img.height * img.width));
    for (int64_t c = 0; c < 3; ++c) v.insert(v.end(), g.data().begin(), g.data().end());
    return Tensor::from({3, img.height, img.width}, std::move(v));
}

ImagePlane tensor_to_image(const Tensor& t) {
    if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) {
        throw DimensionError("tensor_to_image expects [1|3 x H x W], got " + shape_str(t.shape()));
    }
    const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    ImagePlane img = ImagePlane::create(w, h, c);
    const auto& v = t.data();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const double val = std::clamp(v[static_cast<size_t>((ch * h + y) * w + x)], 0.0, 1.0);
                img.at(y, x, ch) = static_cast<uint8_t>(std::lround(val * 255.0));
            }
    return img;
}

}  // namespace matir
