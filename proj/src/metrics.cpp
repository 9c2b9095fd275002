#include "diffdti/metrics.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace diffdti {

void MetricConfig::validate() const {
    if (!(c1 > 0.0) || !(c2 > 0.0)) fail(ErrorKind::Config, "metrics: c1 and c2 must be > 0");
    if (ssim_window < 1 || ssim_window % 2 == 0)
        fail(ErrorKind::Config, "metrics: ssim_window must be odd and >= 1");
}

namespace {

void require_pair(const Volume& ref, const Volume& rec, const std::vector<uint8_t>& mask) {
    if (!ref.same_grid(rec) || ref.nt != rec.nt)
        fail(ErrorKind::Shape, "metrics: reference and reconstruction shapes differ");
    if (mask.size() != ref.nvox())
        fail(ErrorKind::Shape, "metrics: mask size does not match the volume grid");
}

size_t masked_count(const std::vector<uint8_t>& mask) {
    size_t n = 0;
    for (uint8_t m : mask)
        if (m) ++n;
    return n;
}

} // namespace

double psnr(const Volume& ref, const Volume& rec, const std::vector<uint8_t>& mask) {
    require_pair(ref, rec, mask);
    const size_t n = masked_count(mask);
    if (n == 0) fail(ErrorKind::Evaluation, "psnr: empty evaluation mask");

    const size_t nvox = ref.nvox();
    double max_ref = 0.0, mse = 0.0;
    for (int c = 0; c < ref.nt; ++c)
        for (size_t v = 0; v < nvox; ++v) {
            if (!mask[v]) continue;
            const double r = ref.data[c * nvox + v];
            const double g = rec.data[c * nvox + v];
            max_ref = std::max(max_ref, r);
            mse += (r - g) * (r - g);
        }
    mse /= static_cast<double>(n * ref.nt);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(max_ref / std::sqrt(mse));
}

double ssim(const Volume& ref, const Volume& rec, const MetricConfig& cfg,
            const std::vector<uint8_t>& mask) {
    cfg.validate();
    require_pair(ref, rec, mask);
    if (masked_count(mask) == 0) fail(ErrorKind::Evaluation, "ssim: empty evaluation mask");

    const int r = cfg.ssim_window / 2;
    const size_t nvox = ref.nvox();
    const double inv_n = 1.0 / (cfg.ssim_window * cfg.ssim_window);

    double total = 0.0;
    size_t windows = 0;
    for (int c = 0; c < ref.nt; ++c) {
        const double* a = ref.data.data() + static_cast<size_t>(c) * nvox;
        const double* b = rec.data.data() + static_cast<size_t>(c) * nvox;
        for (int z = 0; z < ref.nz; ++z) {
            const size_t base = static_cast<size_t>(z) * ref.ny * ref.nx;
            for (int y = r; y < ref.ny - r; ++y)
                for (int x = r; x < ref.nx - r; ++x) {
                    if (cfg.masked && !mask[base + static_cast<size_t>(y) * ref.nx + x]) continue;
                    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const size_t i = base + static_cast<size_t>(y + dy) * ref.nx + (x + dx);
                            const double va = a[i], vb = b[i];
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                    const double mu_a = sa * inv_n, mu_b = sb * inv_n;
                    const double var_a = saa * inv_n - mu_a * mu_a;
                    const double var_b = sbb * inv_n - mu_b * mu_b;
                    const double cov = sab * inv_n - mu_a * mu_b;
                    const double num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2);
                    const double den =
                        (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2);
                    total += num / den;
                    ++windows;
                }
        }
    }
    if (windows == 0) fail(ErrorKind::Evaluation, "ssim: no interior windows inside the mask");
    return total / static_cast<double>(windows);
}

double nmse(const Volume& ref, const Volume& rec, const std::vector<uint8_t>& mask) {
    require_pair(ref, rec, mask);
    if (masked_count(mask) == 0) fail(ErrorKind::Evaluation, "nmse: empty evaluation mask");
    const size_t nvox = ref.nvox();
    double num = 0.0, den = 0.0;
    for (int c = 0; c < ref.nt; ++c)
        for (size_t v = 0; v < nvox; ++v) {
            if (!mask[v]) continue;
            const double r = ref.data[c * nvox + v];
            const double g = rec.data[c * nvox + v];
            num += (r - g) * (r - g);
            den += r * r;
        }
    if (den == 0.0) fail(ErrorKind::Evaluation, "nmse: all-zero reference over the mask");
    return num / den;
}

namespace {

std::string format_value(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

} // namespace

std::string EvalReport::to_csv() const {
    std::ostringstream ss;
    ss << "map_type,metric,mean,std,n\n";
    for (const auto& row : rows)
        ss << row.map_type << "," << row.metric << "," << format_value(row.mean) << ","
           << format_value(row.stddev) << "," << row.n << "\n";
    return ss.str();
}

std::string EvalReport::to_table() const {
    std::ostringstream ss;
    ss << "map      metric   mean        std         n\n";
    for (const auto& row : rows) {
        ss << row.map_type;
        for (size_t i = row.map_type.size(); i < 9; ++i) ss << ' ';
        ss << row.metric;
        for (size_t i = row.metric.size(); i < 9; ++i) ss << ' ';
        std::string m = format_value(row.mean), s = format_value(row.stddev);
        ss << m;
        for (size_t i = m.size(); i < 12; ++i) ss << ' ';
        ss << s;
        for (size_t i = s.size(); i < 12; ++i) ss << ' ';
        ss << row.n << "\n";
    }
    return ss.str();
}

EvalReport evaluate_run(const std::vector<EvalPair>& pairs, const MetricConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) fail(ErrorKind::Evaluation, "evaluate_run: no pairs");

    // map_type -> metric -> values
    std::map<std::string, std::map<std::string, std::vector<double>>> acc;
    for (const auto& p : pairs) {
        std::vector<uint8_t> mask = p.mask;
        if (!cfg.masked) mask.assign(p.reference.nvox(), 1);
        acc[p.map_type]["psnr"].push_back(psnr(p.reference, p.generated, mask));
        acc[p.map_type]["ssim"].push_back(ssim(p.reference, p.generated, cfg, mask));
        acc[p.map_type]["nmse"].push_back(nmse(p.reference, p.generated, mask));
    }

    EvalReport report;
    for (const auto& [map_type, metrics] : acc)
        for (const char* metric : {"psnr", "ssim", "nmse"}) {
            const auto& values = metrics.at(metric);
            ReportRow row;
            row.map_type = map_type;
            row.metric = metric;
            row.n = values.size();
            double mean = 0.0;
            for (double v : values) mean += v;
            mean /= static_cast<double>(values.size());
            double var = 0.0;
            if (std::isfinite(mean)) {
                for (double v : values) var += (v - mean) * (v - mean);
                var /= static_cast<double>(values.size());
            }
            row.mean = mean;
            row.stddev = std::isfinite(mean) ? std::sqrt(var) : 0.0;
            report.rows.push_back(row);
        }
    return report;
}

} // namespace diffdti
