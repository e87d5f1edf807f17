// Disparity and image file formats (PFM, 16-bit KITTI PNG, RGB8 PNG), dataset
// manifests, and the synthetic random-dot stereogram generator that provides
// exact ground truth.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sled/metrics.hpp"
#include "sled/tensor.hpp"

namespace sled {

// Planar RGB, values in [0,1].
struct Image {
    std::int64_t width = 0, height = 0;
    std::vector<double> data;  // [3][height][width]

    double& at(int c, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    double at(int c, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

struct DisparityMap {
    std::int64_t width = 0, height = 0;
    std::vector<double> values;  // row-major, 0 where invalid
    Mask valid;

    std::size_t idx(std::int64_t y, std::int64_t x) const {
        return static_cast<std::size_t>(y * width + x);
    }
};

struct StereoSample {
    Image left, right;
    DisparityMap gt;
    Mask fg, noc;  // empty when the sample does not carry them
};

// ---- PFM ------------------------------------------------------------------
// Single-channel "Pf" maps; the scale line's sign encodes payload endianness.
// Invalid pixels are stored as +inf and restored as invalid on read.
DisparityMap read_pfm(const std::string& path);
void write_pfm(const DisparityMap& map, const std::string& path);

// ---- KITTI 16-bit PNG -----------------------------------------------------
// disparity = stored / 256, stored 0 = invalid; exact for multiples of 1/256
// in (0, 256).
DisparityMap read_kitti_disp(const std::string& path);
void write_kitti_disp(const DisparityMap& map, const std::string& path);

// Boolean masks ride the same 16-bit container: nonzero = set.
Mask read_mask_png(const std::string& path, std::int64_t& width, std::int64_t& height);
void write_mask_png(const Mask& mask, std::int64_t width, std::int64_t height,
                    const std::string& path);

// ---- RGB8 PNG -------------------------------------------------------------
Image read_image_png(const std::string& path);
void write_image_png(const Image& image, const std::string& path);

// ---- synthetic stereograms --------------------------------------------------
struct SyntheticSpec {
    std::int64_t width = 64, height = 64;
    std::uint64_t seed = 0;
    std::string field = "constant";  // constant | two_plane | boxes
    double d0 = 8.0;                 // base/left-plane disparity
    double d1 = 16.0;                // second-plane / maximum box disparity
    int boxes = 3;
};

struct DisparityField {
    std::function<double(std::int64_t x, std::int64_t y)> d;
    std::function<bool(std::int64_t x, std::int64_t y)> fg;  // null: no fg mask
};

// Builds the disparity field `spec.field` names; boxes are placed
// deterministically from the seed and form the foreground mask.
DisparityField make_field(const SyntheticSpec& spec);

// Dense-noise stereo pair: right[x - d(x,y)] = left[x] with the nearer
// (larger-d) surface winning collisions; unfilled right pixels get fresh
// noise. gt equals the field exactly; noc marks left pixels whose match
// survives in the right view. Field values must be non-negative integers
// below width/2.
StereoSample generate_stereogram(std::int64_t width, std::int64_t height,
                                 const DisparityField& field, std::uint64_t texture_seed);
StereoSample generate_stereogram(const SyntheticSpec& spec);

// ---- manifests --------------------------------------------------------------
// JSON: {"samples": [{"left": .., "right": .., "gt": .., "noc"?, "fg"?,
// "pred"?} | {"synthetic": {..}}]}. Paths resolve relative to the manifest.
struct SampleSpec {
    bool synthetic = false;
    SyntheticSpec synth;
    std::string left, right, gt, noc, fg, pred;  // empty = absent
};

struct Manifest {
    std::vector<SampleSpec> samples;
};

Manifest load_manifest(const std::string& path);

// Materializes one sample; missing files raise ManifestError naming the path
// and sample index. `pred` (when listed) loads via load_pred.
StereoSample load_sample(const SampleSpec& spec, std::size_t index);
DisparityMap load_pred(const SampleSpec& spec, std::size_t index);

// Disparity map by extension: .pfm or .png (KITTI rule).
DisparityMap read_disparity(const std::string& path);
void write_disparity(const DisparityMap& map, const std::string& path);

// ---- model input ------------------------------------------------------------
// [1,3,H,W], channels normalized with the fixed (0.485/0.456/0.406,
// 0.229/0.224/0.225) constants.
Tensor image_to_tensor(const Image& image);

// Fixed blue->red colormap for disparity visualization; invalid pixels black.
Image colorize_disparity(const DisparityMap& map, double max_disp);

}  // namespace sled
