// Disparity evaluation: end-point error, >t px error rates, and the KITTI
// D1 outlier percentages over background/foreground/all, for the full image
// ("All") and the non-occluded subset ("Noc").
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sled {

using Mask = std::vector<std::uint8_t>;  // nonzero = selected

// mean |pred - gt| over masked pixels; empty mask -> EvalError
double end_point_error(const std::vector<double>& pred, const std::vector<double>& gt,
                       const Mask& mask);

// 100 * |{ |pred - gt| > t }| / |mask|; t must be > 0; empty mask -> EvalError
double threshold_error(const std::vector<double>& pred, const std::vector<double>& gt,
                       const Mask& mask, double t);

// A pixel is a D1 outlier iff |pred - gt| > 3 px AND |pred - gt| > 0.05 * gt.
bool d1_outlier(double pred, double gt);

struct MetricReport {
    std::string region;  // "All" or "Noc"
    std::optional<double> epe;
    std::map<int, std::optional<double>> gt_px;  // t in {1,3,5} -> percent
    std::optional<double> d1_bg, d1_fg, d1_all;  // percents; absent when the class is empty

    std::string to_json(int indent = 0) const;
    std::vector<std::string> to_kv() const;  // "key=value" lines, absent entries omitted
};

// Count-based accumulator so per-sample results merge into dataset aggregates
// weighted by pixel counts.
struct MetricCounts {
    std::int64_t n = 0;  // selected valid pixels
    double abs_err_sum = 0.0;
    std::map<int, std::int64_t> above = {{1, 0}, {3, 0}, {5, 0}};
    std::int64_t d1_bad = 0;
    bool has_fg_partition = false;
    std::int64_t bg_n = 0, bg_bad = 0, fg_n = 0, fg_bad = 0;

    void merge(const MetricCounts& other);
    MetricReport report(const std::string& region) const;
};

// Tallies every metric over the pixels selected by `sel`. `fg` may be empty
// (no bg/fg partition: d1_bg/d1_fg reported absent). All masks are full-image
// sized and are intersected with `sel` here.
MetricCounts accumulate_counts(const std::vector<double>& pred, const std::vector<double>& gt,
                               const Mask& sel, const Mask& fg);

// Per-sample evaluation: an "All" report over valid pixels, plus a "Noc"
// report when a non-occlusion mask is present. Masks may be empty vectors.
std::vector<MetricReport> evaluate_sample(const std::vector<double>& pred,
                                          const std::vector<double>& gt, const Mask& valid,
                                          const Mask& fg, const Mask& noc);

// d1 fields only, per region (API mirror of the metric definition)
std::vector<MetricReport> d1_metric(const std::vector<double>& pred,
                                    const std::vector<double>& gt, const Mask& valid,
                                    const Mask& fg, const Mask& noc);

}  // namespace sled
