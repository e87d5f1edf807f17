#include "sled/data.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "sled/errors.hpp"
#include "sled/random.hpp"

namespace sled {
namespace {

// ---- PFM ------------------------------------------------------------------

// Tracks the byte offset so header errors can point at the exact spot.
struct PfmScanner {
    const std::string& bytes;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError("pfm: " + msg + " at byte " + std::to_string(pos));
    }
    void skip_ws() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    }
    std::string token() {
        skip_ws();
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos == start) fail("missing header token");
        return bytes.substr(start, pos - start);
    }
    std::int64_t integer(const std::string& what) {
        const std::string t = token();
        try {
            std::size_t used = 0;
            const long long v = std::stoll(t, &used);
            if (used != t.size() || v <= 0) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            fail("bad " + what + " '" + t + "'");
        }
    }
};

float load_f32(const unsigned char* b, bool little_endian) {
    std::uint32_t u;
    if (little_endian)
        u = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
            static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    else
        u = static_cast<std::uint32_t>(b[3]) | static_cast<std::uint32_t>(b[2]) << 8 |
            static_cast<std::uint32_t>(b[1]) << 16 | static_cast<std::uint32_t>(b[0]) << 24;
    return std::bit_cast<float>(u);
}

void store_f32_le(float f, unsigned char* b) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    b[0] = static_cast<unsigned char>(u);
    b[1] = static_cast<unsigned char>(u >> 8);
    b[2] = static_cast<unsigned char>(u >> 16);
    b[3] = static_cast<unsigned char>(u >> 24);
}

// ---- libpng plumbing --------------------------------------------------------

struct PngCloser {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    bool writing = false;

    ~PngCloser() {
        if (png) {
            if (writing)
                png_destroy_write_struct(&png, info ? &info : nullptr);
            else
                png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        }
        if (fp) std::fclose(fp);
    }
};

// libpng reports errors via longjmp; translate to exceptions after cleanup.
// Row memory is owned by the caller so no destructor is skipped by the jump.
bool read_png_rows(const std::string& path, std::vector<unsigned char>& raster,
                   std::int64_t& width, std::int64_t& height, int& bit_depth, int& channels,
                   bool keep_16bit, std::string& error) {
    PngCloser c;
    c.fp = std::fopen(path.c_str(), "rb");
    if (!c.fp) {
        error = "cannot open " + path;
        return false;
    }
    c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) {
        error = "png_create_read_struct failed";
        return false;
    }
    c.info = png_create_info_struct(c.png);
    if (!c.info) {
        error = "png_create_info_struct failed";
        return false;
    }
    if (setjmp(png_jmpbuf(c.png))) {
        error = "libpng failed decoding " + path;
        return false;
    }
    png_init_io(c.png, c.fp);
    png_read_info(c.png, c.info);
    width = png_get_image_width(c.png, c.info);
    height = png_get_image_height(c.png, c.info);
    bit_depth = png_get_bit_depth(c.png, c.info);
    const int color = png_get_color_type(c.png, c.info);

    if (keep_16bit) {
        // disparity/mask container: demand 16-bit grayscale as stored
        if (color != PNG_COLOR_TYPE_GRAY || bit_depth != 16) {
            error = "expected 16-bit grayscale";
            return false;
        }
    } else {
        // normalize any image to 8-bit RGB
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(c.png);
        if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(c.png);
        if (png_get_valid(c.png, c.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(c.png);
        if (bit_depth == 16) png_set_strip_16(c.png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(c.png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(c.png);
    }
    png_read_update_info(c.png, c.info);
    const std::size_t rowbytes = png_get_rowbytes(c.png, c.info);
    channels = static_cast<int>(png_get_channels(c.png, c.info));
    bit_depth = png_get_bit_depth(c.png, c.info);
    raster.resize(rowbytes * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (std::int64_t y = 0; y < height; ++y)
        rows[static_cast<std::size_t>(y)] = raster.data() + rowbytes * static_cast<std::size_t>(y);
    png_read_image(c.png, rows.data());
    png_read_end(c.png, nullptr);
    return true;
}

bool write_png_rows(const std::string& path, const std::vector<unsigned char>& raster,
                    std::int64_t width, std::int64_t height, int bit_depth, int color_type,
                    std::string& error) {
    PngCloser c;
    c.writing = true;
    c.fp = std::fopen(path.c_str(), "wb");
    if (!c.fp) {
        error = "cannot open " + path + " for writing";
        return false;
    }
    c.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) {
        error = "png_create_write_struct failed";
        return false;
    }
    c.info = png_create_info_struct(c.png);
    if (!c.info) {
        error = "png_create_info_struct failed";
        return false;
    }
    if (setjmp(png_jmpbuf(c.png))) {
        error = "libpng failed encoding " + path;
        return false;
    }
    png_init_io(c.png, c.fp);
    png_set_IHDR(c.png, c.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(c.png, c.info);
    const std::size_t rowbytes = raster.size() / static_cast<std::size_t>(height);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (std::int64_t y = 0; y < height; ++y)
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(raster.data() + rowbytes * static_cast<std::size_t>(y));
    png_write_image(c.png, rows.data());
    png_write_end(c.png, nullptr);
    return true;
}

std::vector<std::uint16_t> read_png16(const std::string& path, std::int64_t& width,
                                      std::int64_t& height) {
    std::vector<unsigned char> raster;
    int bit_depth = 0, channels = 0;
    std::string error;
    if (!read_png_rows(path, raster, width, height, bit_depth, channels, true, error))
        throw FormatError("png16: " + error);
    std::vector<std::uint16_t> out(static_cast<std::size_t>(width * height));
    for (std::size_t i = 0; i < out.size(); ++i)  // PNG stores big-endian samples
        out[i] = static_cast<std::uint16_t>(raster[2 * i] << 8 | raster[2 * i + 1]);
    return out;
}

void write_png16(const std::vector<std::uint16_t>& values, std::int64_t width,
                 std::int64_t height, const std::string& path) {
    if (static_cast<std::int64_t>(values.size()) != width * height)
        throw ShapeError("png16: value count does not match dimensions");
    std::vector<unsigned char> raster(values.size() * 2);
    for (std::size_t i = 0; i < values.size(); ++i) {
        raster[2 * i] = static_cast<unsigned char>(values[i] >> 8);
        raster[2 * i + 1] = static_cast<unsigned char>(values[i] & 0xff);
    }
    std::string error;
    if (!write_png_rows(path, raster, width, height, 16, PNG_COLOR_TYPE_GRAY, error))
        throw FormatError("png16: " + error);
}

double field_value(const DisparityField& field, std::int64_t x, std::int64_t y,
                   std::int64_t width) {
    const double d = field.d(x, y);
    if (!(d >= 0) || d != std::floor(d))
        throw ParamError("stereogram: field must be non-negative integers, got " +
                         std::to_string(d));
    if (2 * d >= static_cast<double>(width))
        throw ParamError("stereogram: disparity " + std::to_string(d) + " >= width/2");
    return d;
}

std::string resolve(const std::filesystem::path& base, const std::string& rel) {
    std::filesystem::path p(rel);
    if (p.is_absolute()) return p.string();
    return (base / p).string();
}

const char* kSampleKeys[] = {"left", "right", "gt", "noc", "fg", "pred", "synthetic"};
const char* kSynthKeys[] = {"width", "height", "seed", "field", "d0", "d1", "boxes"};

}  // namespace

DisparityMap read_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("pfm: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    const std::string bytes = buf.str();

    PfmScanner sc{bytes};
    const std::string magic = sc.token();
    if (magic == "PF") throw FormatError("pfm: color (PF) maps are not supported: " + path);
    if (magic != "Pf") sc.fail("bad magic '" + magic + "'");
    const std::int64_t width = sc.integer("width");
    const std::int64_t height = sc.integer("height");
    const std::string scale_tok = sc.token();
    double scale = 0;
    try {
        std::size_t used = 0;
        scale = std::stod(scale_tok, &used);
        if (used != scale_tok.size() || scale == 0) throw std::invalid_argument(scale_tok);
    } catch (const std::exception&) {
        sc.fail("bad scale '" + scale_tok + "'");
    }
    if (sc.pos >= bytes.size()) sc.fail("missing payload delimiter");
    ++sc.pos;  // exactly one whitespace byte separates header and payload

    const std::size_t need = static_cast<std::size_t>(width * height) * 4;
    if (bytes.size() - sc.pos < need)
        throw ParseError("pfm: payload truncated (need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - sc.pos) + ") at byte " +
                         std::to_string(sc.pos));

    DisparityMap map;
    map.width = width;
    map.height = height;
    map.values.assign(static_cast<std::size_t>(width * height), 0.0);
    map.valid.assign(static_cast<std::size_t>(width * height), 0);
    const bool le = scale < 0;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + sc.pos);
    for (std::int64_t y = 0; y < height; ++y) {
        const std::int64_t row = height - 1 - y;  // bottom-up raster
        for (std::int64_t x = 0; x < width; ++x) {
            const float f = load_f32(p + ((y * width + x) * 4), le);
            const std::size_t i = map.idx(row, x);
            if (std::isfinite(f)) {
                map.values[i] = static_cast<double>(f);
                map.valid[i] = 1;
            }
        }
    }
    return map;
}

void write_pfm(const DisparityMap& map, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("pfm: cannot open " + path + " for writing");
    os << "Pf\n" << map.width << " " << map.height << "\n-1.0\n";
    std::vector<unsigned char> payload(static_cast<std::size_t>(map.width * map.height) * 4);
    std::size_t o = 0;
    for (std::int64_t y = map.height - 1; y >= 0; --y) {
        for (std::int64_t x = 0; x < map.width; ++x, o += 4) {
            const std::size_t i = map.idx(y, x);
            const float f = map.valid[i] ? static_cast<float>(map.values[i])
                                         : std::numeric_limits<float>::infinity();
            store_f32_le(f, payload.data() + o);
        }
    }
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    if (!os) throw ParseError("pfm: write failed for " + path);
}

DisparityMap read_kitti_disp(const std::string& path) {
    DisparityMap map;
    const std::vector<std::uint16_t> stored = read_png16(path, map.width, map.height);
    map.values.assign(stored.size(), 0.0);
    map.valid.assign(stored.size(), 0);
    for (std::size_t i = 0; i < stored.size(); ++i) {
        if (stored[i] == 0) continue;
        map.values[i] = stored[i] / 256.0;
        map.valid[i] = 1;
    }
    return map;
}

void write_kitti_disp(const DisparityMap& map, const std::string& path) {
    std::vector<std::uint16_t> stored(map.values.size(), 0);
    for (std::size_t i = 0; i < stored.size(); ++i) {
        if (!map.valid[i]) continue;
        const double q = std::round(map.values[i] * 256.0);
        stored[i] = static_cast<std::uint16_t>(std::clamp(q, 1.0, 65535.0));
    }
    write_png16(stored, map.width, map.height, path);
}

Mask read_mask_png(const std::string& path, std::int64_t& width, std::int64_t& height) {
    const std::vector<std::uint16_t> stored = read_png16(path, width, height);
    Mask mask(stored.size());
    for (std::size_t i = 0; i < stored.size(); ++i) mask[i] = stored[i] != 0;
    return mask;
}

void write_mask_png(const Mask& mask, std::int64_t width, std::int64_t height,
                    const std::string& path) {
    std::vector<std::uint16_t> stored(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) stored[i] = mask[i] ? 65535 : 0;
    write_png16(stored, width, height, path);
}

Image read_image_png(const std::string& path) {
    std::vector<unsigned char> raster;
    std::int64_t w = 0, h = 0;
    int bit_depth = 0, channels = 0;
    std::string error;
    if (!read_png_rows(path, raster, w, h, bit_depth, channels, false, error))
        throw FormatError("png: " + error);
    if (channels != 3 || bit_depth != 8)
        throw FormatError("png: could not normalize " + path + " to 8-bit RGB");
    Image img;
    img.width = w;
    img.height = h;
    img.data.resize(static_cast<std::size_t>(3 * w * h));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raster[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0;
    return img;
}

void write_image_png(const Image& image, const std::string& path) {
    std::vector<unsigned char> raster(static_cast<std::size_t>(3 * image.width * image.height));
    for (std::int64_t y = 0; y < image.height; ++y)
        for (std::int64_t x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                raster[static_cast<std::size_t>((y * image.width + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    std::string error;
    if (!write_png_rows(path, raster, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, error))
        throw FormatError("png: " + error);
}

DisparityField make_field(const SyntheticSpec& spec) {
    if (spec.field == "constant") {
        const double d = spec.d0;
        return {[d](std::int64_t, std::int64_t) { return d; }, nullptr};
    }
    if (spec.field == "two_plane") {
        const double d0 = spec.d0, d1 = spec.d1;
        const std::int64_t split = spec.width / 2;
        return {[d0, d1, split](std::int64_t x, std::int64_t) { return x < split ? d0 : d1; },
                nullptr};
    }
    if (spec.field == "boxes") {
        // background at d0; `boxes` axis-aligned boxes at disparities in
        // (d0, d1], later boxes in front (drawn last wins)
        struct Box {
            std::int64_t x0, y0, x1, y1;
            double d;
        };
        if (spec.width < 16 || spec.height < 16)
            throw ParamError("boxes field needs at least a 16x16 canvas");
        auto boxes = std::make_shared<std::vector<Box>>();
        Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + 17);
        const auto lo = static_cast<std::int64_t>(spec.d0);
        const auto hi = static_cast<std::int64_t>(spec.d1);
        if (hi <= lo) throw ParamError("boxes field needs d1 > d0");
        for (int i = 0; i < spec.boxes; ++i) {
            Box b;
            const std::int64_t bw =
                4 + static_cast<std::int64_t>(rng.next_u64() %
                                              static_cast<std::uint64_t>(spec.width / 4));
            const std::int64_t bh =
                4 + static_cast<std::int64_t>(rng.next_u64() %
                                              static_cast<std::uint64_t>(spec.height / 4));
            b.x0 = static_cast<std::int64_t>(rng.next_u64() %
                                             static_cast<std::uint64_t>(spec.width - bw));
            b.y0 = static_cast<std::int64_t>(rng.next_u64() %
                                             static_cast<std::uint64_t>(spec.height - bh));
            b.x1 = b.x0 + bw;
            b.y1 = b.y0 + bh;
            b.d = static_cast<double>(
                lo + 1 +
                static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(hi - lo)));
            boxes->push_back(b);
        }
        const double bg = spec.d0;
        auto hit = [boxes](std::int64_t x, std::int64_t y) -> const Box* {
            const Box* found = nullptr;
            for (const Box& b : *boxes)
                if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) found = &b;
            return found;
        };
        return {[bg, hit](std::int64_t x, std::int64_t y) {
                    const Box* b = hit(x, y);
                    return b ? b->d : bg;
                },
                [hit](std::int64_t x, std::int64_t y) { return hit(x, y) != nullptr; }};
    }
    throw ParamError("unknown synthetic field '" + spec.field + "'");
}

StereoSample generate_stereogram(std::int64_t width, std::int64_t height,
                                 const DisparityField& field, std::uint64_t texture_seed) {
    if (width < 2 || height < 1) throw ParamError("stereogram: degenerate dimensions");
    StereoSample s;
    s.left.width = s.right.width = width;
    s.left.height = s.right.height = height;
    s.left.data.resize(static_cast<std::size_t>(3 * width * height));
    s.right.data.resize(static_cast<std::size_t>(3 * width * height));
    s.gt.width = width;
    s.gt.height = height;
    s.gt.values.assign(static_cast<std::size_t>(width * height), 0.0);
    s.gt.valid.assign(static_cast<std::size_t>(width * height), 1);
    s.noc.assign(static_cast<std::size_t>(width * height), 0);
    const bool with_fg = static_cast<bool>(field.fg);
    if (with_fg) s.fg.assign(static_cast<std::size_t>(width * height), 0);

    Rng rng(texture_seed * 0x2545F4914F6CDD1Dull + 1);
    for (double& v : s.left.data) v = rng.next_double();

    std::vector<std::int64_t> src(static_cast<std::size_t>(width));
    std::vector<double> src_d(static_cast<std::size_t>(width));
    for (std::int64_t y = 0; y < height; ++y) {
        std::fill(src.begin(), src.end(), -1);
        std::fill(src_d.begin(), src_d.end(), -1.0);
        for (std::int64_t x = 0; x < width; ++x) {
            const double d = field_value(field, x, y, width);
            const std::size_t i = s.gt.idx(y, x);
            s.gt.values[i] = d;
            if (with_fg) s.fg[i] = field.fg(x, y) ? 1 : 0;
            const std::int64_t u = x - static_cast<std::int64_t>(d);
            if (u >= 0 && d > src_d[static_cast<std::size_t>(u)]) {
                src_d[static_cast<std::size_t>(u)] = d;
                src[static_cast<std::size_t>(u)] = x;
            }
        }
        for (std::int64_t u = 0; u < width; ++u) {
            const std::int64_t x = src[static_cast<std::size_t>(u)];
            for (int c = 0; c < 3; ++c)
                s.right.at(c, y, u) = x >= 0 ? s.left.at(c, y, x) : rng.next_double();
            if (x >= 0) s.noc[s.gt.idx(y, x)] = 1;  // this left pixel survives
        }
    }
    return s;
}

StereoSample generate_stereogram(const SyntheticSpec& spec) {
    return generate_stereogram(spec.width, spec.height, make_field(spec), spec.seed);
}

Manifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ManifestError("manifest: cannot open " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError("manifest: " + path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("samples") || !doc["samples"].is_array())
        throw ManifestError("manifest: " + path + ": expected {\"samples\": [...]}");

    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    Manifest m;
    std::size_t index = 0;
    for (const auto& entry : doc["samples"]) {
        const std::string where = "manifest: sample " + std::to_string(index);
        if (!entry.is_object()) throw ManifestError(where + ": expected an object");
        for (const auto& [key, value] : entry.items()) {
            if (std::find_if(std::begin(kSampleKeys), std::end(kSampleKeys),
                             [&](const char* k) { return key == k; }) == std::end(kSampleKeys))
                throw ManifestError(where + ": unknown key '" + key + "'");
            (void)value;
        }
        SampleSpec spec;
        if (entry.contains("synthetic")) {
            const auto& sy = entry["synthetic"];
            if (!sy.is_object()) throw ManifestError(where + ": synthetic must be an object");
            for (const auto& [key, value] : sy.items()) {
                if (std::find_if(std::begin(kSynthKeys), std::end(kSynthKeys),
                                 [&](const char* k) { return key == k; }) == std::end(kSynthKeys))
                    throw ManifestError(where + ": unknown synthetic key '" + key + "'");
                (void)value;
            }
            try {
                spec.synthetic = true;
                spec.synth.width = sy.value("width", spec.synth.width);
                spec.synth.height = sy.value("height", spec.synth.height);
                spec.synth.seed = sy.value("seed", spec.synth.seed);
                spec.synth.field = sy.value("field", spec.synth.field);
                spec.synth.d0 = sy.value("d0", spec.synth.d0);
                spec.synth.d1 = sy.value("d1", spec.synth.d1);
                spec.synth.boxes = sy.value("boxes", spec.synth.boxes);
            } catch (const nlohmann::json::exception& e) {
                throw ManifestError(where + ": " + e.what());
            }
        } else {
            auto text = [&](const char* key, bool required) {
                if (!entry.contains(key)) {
                    if (required) throw ManifestError(where + ": missing '" + key + "'");
                    return std::string();
                }
                if (!entry[key].is_string())
                    throw ManifestError(where + ": '" + key + "' must be a path string");
                return resolve(base, entry[key].get<std::string>());
            };
            spec.left = text("left", true);
            spec.right = text("right", true);
            spec.gt = text("gt", true);
            spec.noc = text("noc", false);
            spec.fg = text("fg", false);
            spec.pred = text("pred", false);
        }
        m.samples.push_back(std::move(spec));
        ++index;
    }
    return m;
}

DisparityMap read_disparity(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".pfm") return read_pfm(path);
    return read_kitti_disp(path);
}

void write_disparity(const DisparityMap& map, const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".pfm")
        write_pfm(map, path);
    else
        write_kitti_disp(map, path);
}

namespace {
void require_file(const std::string& path, const char* role, std::size_t index) {
    if (!std::filesystem::exists(path))
        throw ManifestError("sample " + std::to_string(index) + ": missing " + role + " file " +
                            path);
}
}  // namespace

StereoSample load_sample(const SampleSpec& spec, std::size_t index) {
    if (spec.synthetic) return generate_stereogram(spec.synth);
    require_file(spec.left, "left", index);
    require_file(spec.right, "right", index);
    require_file(spec.gt, "gt", index);
    StereoSample s;
    s.left = read_image_png(spec.left);
    s.right = read_image_png(spec.right);
    s.gt = read_disparity(spec.gt);
    if (s.left.width != s.right.width || s.left.height != s.right.height ||
        s.left.width != s.gt.width || s.left.height != s.gt.height)
        throw ManifestError("sample " + std::to_string(index) +
                            ": left/right/gt dimensions disagree");
    std::int64_t w = 0, h = 0;
    if (!spec.noc.empty()) {
        require_file(spec.noc, "noc", index);
        s.noc = read_mask_png(spec.noc, w, h);
        if (w != s.gt.width || h != s.gt.height)
            throw ManifestError("sample " + std::to_string(index) + ": noc mask dimensions");
    }
    if (!spec.fg.empty()) {
        require_file(spec.fg, "fg", index);
        s.fg = read_mask_png(spec.fg, w, h);
        if (w != s.gt.width || h != s.gt.height)
            throw ManifestError("sample " + std::to_string(index) + ": fg mask dimensions");
    }
    return s;
}

DisparityMap load_pred(const SampleSpec& spec, std::size_t index) {
    if (spec.pred.empty())
        throw ManifestError("sample " + std::to_string(index) + ": no pred file listed");
    require_file(spec.pred, "pred", index);
    return read_disparity(spec.pred);
}

Tensor image_to_tensor(const Image& image) {
    static constexpr double kMean[3] = {0.485, 0.456, 0.406};
    static constexpr double kStd[3] = {0.229, 0.224, 0.225};
    std::vector<double> v(image.data.size());
    const std::size_t plane = static_cast<std::size_t>(image.width * image.height);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            v[c * plane + i] = (image.data[c * plane + i] - kMean[c]) / kStd[c];
    return Tensor::from_data({1, 3, image.height, image.width}, std::move(v));
}

Image colorize_disparity(const DisparityMap& map, double max_disp) {
    if (max_disp <= 0) throw ParamError("colorize: max_disp must be > 0");
    Image img;
    img.width = map.width;
    img.height = map.height;
    img.data.assign(static_cast<std::size_t>(3 * map.width * map.height), 0.0);
    for (std::int64_t y = 0; y < map.height; ++y)
        for (std::int64_t x = 0; x < map.width; ++x) {
            const std::size_t i = map.idx(y, x);
            if (!map.valid[i]) continue;  // invalid stays black
            // piecewise-linear blue (far) -> green -> red (near)
            const double t = std::clamp(map.values[i] / max_disp, 0.0, 1.0);
            const double r = std::clamp(2.0 * t - 0.5, 0.0, 1.0);
            const double g = 1.0 - std::abs(2.0 * t - 1.0);
            const double b = std::clamp(1.5 - 2.0 * t, 0.0, 1.0);
            img.at(0, y, x) = r;
            img.at(1, y, x) = g;
            img.at(2, y, x) = b;
        }
    return img;
}

}  // namespace sled
