#include "sled/metrics.hpp"

#include <cmath>
#include <sstream>

#include "sled/errors.hpp"

namespace sled {
namespace {

void check_sizes(const std::vector<double>& pred, const std::vector<double>& gt,
                 const Mask& mask) {
    if (pred.size() != gt.size())
        throw ShapeError("metrics: pred has " + std::to_string(pred.size()) +
                         " pixels but gt has " + std::to_string(gt.size()));
    if (mask.size() != pred.size())
        throw ShapeError("metrics: mask has " + std::to_string(mask.size()) +
                         " entries for " + std::to_string(pred.size()) + " pixels");
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::optional<double> percent(std::int64_t bad, std::int64_t n) {
    if (n == 0) return std::nullopt;
    return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

}  // namespace

double end_point_error(const std::vector<double>& pred, const std::vector<double>& gt,
                       const Mask& mask) {
    check_sizes(pred, gt, mask);
    double sum = 0.0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        sum += std::abs(pred[i] - gt[i]);
        ++n;
    }
    if (n == 0) throw EvalError("end_point_error: empty mask");
    return sum / static_cast<double>(n);
}

double threshold_error(const std::vector<double>& pred, const std::vector<double>& gt,
                       const Mask& mask, double t) {
    if (t <= 0) throw ParamError("threshold_error: t must be > 0, got " + std::to_string(t));
    check_sizes(pred, gt, mask);
    std::int64_t n = 0, bad = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        ++n;
        if (std::abs(pred[i] - gt[i]) > t) ++bad;
    }
    if (n == 0) throw EvalError("threshold_error: empty mask");
    return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

bool d1_outlier(double pred, double gt) {
    const double err = std::abs(pred - gt);
    return err > 3.0 && err > 0.05 * gt;
}

void MetricCounts::merge(const MetricCounts& other) {
    n += other.n;
    abs_err_sum += other.abs_err_sum;
    for (auto& [t, cnt] : above) cnt += other.above.at(t);
    d1_bad += other.d1_bad;
    has_fg_partition = has_fg_partition || other.has_fg_partition;
    bg_n += other.bg_n;
    bg_bad += other.bg_bad;
    fg_n += other.fg_n;
    fg_bad += other.fg_bad;
}

MetricReport MetricCounts::report(const std::string& region) const {
    MetricReport r;
    r.region = region;
    if (n > 0) r.epe = abs_err_sum / static_cast<double>(n);
    for (const auto& [t, bad] : above) r.gt_px[t] = percent(bad, n);
    r.d1_all = percent(d1_bad, n);
    if (has_fg_partition) {
        r.d1_bg = percent(bg_bad, bg_n);
        r.d1_fg = percent(fg_bad, fg_n);
    }
    return r;
}

MetricCounts accumulate_counts(const std::vector<double>& pred, const std::vector<double>& gt,
                               const Mask& sel, const Mask& fg) {
    check_sizes(pred, gt, sel);
    if (!fg.empty() && fg.size() != pred.size())
        throw ShapeError("metrics: fg mask size mismatch");
    MetricCounts c;
    c.has_fg_partition = !fg.empty();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!sel[i]) continue;
        const double err = std::abs(pred[i] - gt[i]);
        ++c.n;
        c.abs_err_sum += err;
        for (auto& [t, cnt] : c.above)
            if (err > t) ++cnt;
        const bool bad = d1_outlier(pred[i], gt[i]);
        if (bad) ++c.d1_bad;
        if (c.has_fg_partition) {
            if (fg[i]) {
                ++c.fg_n;
                if (bad) ++c.fg_bad;
            } else {
                ++c.bg_n;
                if (bad) ++c.bg_bad;
            }
        }
    }
    return c;
}

std::vector<MetricReport> evaluate_sample(const std::vector<double>& pred,
                                          const std::vector<double>& gt, const Mask& valid,
                                          const Mask& fg, const Mask& noc) {
    std::vector<MetricReport> out;
    out.push_back(accumulate_counts(pred, gt, valid, fg).report("All"));
    if (!noc.empty()) {
        if (noc.size() != valid.size()) throw ShapeError("metrics: noc mask size mismatch");
        Mask sel(valid.size());
        for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = valid[i] && noc[i];
        out.push_back(accumulate_counts(pred, gt, sel, fg).report("Noc"));
    }
    return out;
}

std::vector<MetricReport> d1_metric(const std::vector<double>& pred, const std::vector<double>& gt,
                                    const Mask& valid, const Mask& fg, const Mask& noc) {
    std::vector<MetricReport> reports = evaluate_sample(pred, gt, valid, fg, noc);
    for (MetricReport& r : reports) {
        r.epe.reset();
        r.gt_px.clear();
    }
    return reports;
}

std::string MetricReport::to_json(int indent) const {
    const std::string pad(static_cast<std::size_t>(indent), ' ');
    const std::string in(static_cast<std::size_t>(indent) + 2, ' ');
    std::ostringstream os;
    os << "{\n";
    os << in << "\"region\": \"" << region << "\"";
    if (epe) os << ",\n" << in << "\"epe\": " << fmt(*epe);
    bool any_px = false;
    for (const auto& [t, v] : gt_px) any_px = any_px || v.has_value();
    if (any_px) {
        os << ",\n" << in << "\"gt_px\": {";
        bool first = true;
        for (const auto& [t, v] : gt_px) {
            if (!v) continue;
            os << (first ? "" : ", ") << "\"" << t << "\": " << fmt(*v);
            first = false;
        }
        os << "}";
    }
    if (d1_bg) os << ",\n" << in << "\"d1_bg\": " << fmt(*d1_bg);
    if (d1_fg) os << ",\n" << in << "\"d1_fg\": " << fmt(*d1_fg);
    if (d1_all) os << ",\n" << in << "\"d1_all\": " << fmt(*d1_all);
    os << "\n" << pad << "}";
    return os.str();
}

std::vector<std::string> MetricReport::to_kv() const {
    std::vector<std::string> lines;
    lines.push_back("region=" + region);
    if (epe) lines.push_back("epe=" + fmt(*epe));
    for (const auto& [t, v] : gt_px)
        if (v) lines.push_back("gt_px" + std::to_string(t) + "=" + fmt(*v));
    if (d1_bg) lines.push_back("d1_bg=" + fmt(*d1_bg));
    if (d1_fg) lines.push_back("d1_fg=" + fmt(*d1_fg));
    if (d1_all) lines.push_back("d1_all=" + fmt(*d1_all));
    return lines;
}

}  // namespace sled
