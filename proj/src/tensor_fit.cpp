#include "diffdti/tensor_fit.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <sstream>

namespace diffdti {

DwiStudy dwi_forward_model(const TensorField& field, const Volume& b0_field,
                           const GradientTable& table) {
    table.validate();
    if (field.nx != b0_field.nx || field.ny != b0_field.ny || field.nz != b0_field.nz)
        fail(ErrorKind::Shape, "dwi_forward_model: tensor field and b0 grids differ");
    for (double v : b0_field.data)
        if (v < 0.f) fail(ErrorKind::Data, "dwi_forward_model: negative b0 signal");

    const int n = static_cast<int>(table.size());
    DwiStudy study;
    study.table = table;
    study.volumes = Volume(field.nx, field.ny, field.nz, n);
    study.volumes.pixdim = b0_field.pixdim;

    const size_t nvox = field.nvox();
    for (int i = 0; i < n; ++i) {
        const double b = table.bvalues[i];
        const Vec3& g = table.directions[i];
        double* out = study.volumes.data.data() + static_cast<size_t>(i) * nvox;
        if (b == 0.0) {
            std::copy(b0_field.data.begin(), b0_field.data.begin() + nvox, out);
            continue;
        }
        for (size_t v = 0; v < nvox; ++v) {
            const double adc = field.tensors[v].quadratic_form(g);
            out[v] = b0_field.data[v] * std::exp(-b * adc);
        }
    }
    return study;
}

FitResult fit_tensor_lls(const DwiStudy& study, const FitOptions& opts) {
    study.validate();
    const GradientTable& table = study.table;

    std::vector<int> b0_idx, dwi_idx;
    for (size_t i = 0; i < table.size(); ++i)
        (table.bvalues[i] <= opts.b0_tolerance ? b0_idx : dwi_idx).push_back(static_cast<int>(i));

    if (b0_idx.empty())
        fail(ErrorKind::InsufficientData, "tensor fit needs at least one b0 volume");
    if (dwi_idx.size() < 6)
        fail(ErrorKind::InsufficientData,
             "tensor fit needs at least 6 diffusion-weighted volumes, got " +
                 std::to_string(dwi_idx.size()));

    // Design row for entry i: -b * (gx^2, gy^2, gz^2, 2 gx gy, 2 gx gz, 2 gy gz),
    // optional 7th column of ones for ln(S0) when several b0 volumes exist.
    const bool fit_s0 = b0_idx.size() > 1;
    const int rows = static_cast<int>(fit_s0 ? table.size() : dwi_idx.size());
    const int cols = fit_s0 ? 7 : 6;

    Eigen::MatrixXd design(rows, cols);
    std::vector<int> row_vol(rows);
    {
        int r = 0;
        auto fill_row = [&](int vol_index) {
            const double b = table.bvalues[vol_index];
            const Vec3& g = table.directions[vol_index];
            design(r, 0) = -b * g[0] * g[0];
            design(r, 1) = -b * g[1] * g[1];
            design(r, 2) = -b * g[2] * g[2];
            design(r, 3) = -b * 2.0 * g[0] * g[1];
            design(r, 4) = -b * 2.0 * g[0] * g[2];
            design(r, 5) = -b * 2.0 * g[1] * g[2];
            if (fit_s0) design(r, 6) = 1.0;
            row_vol[r] = vol_index;
            ++r;
        };
        if (fit_s0)
            for (size_t i = 0; i < table.size(); ++i) fill_row(static_cast<int>(i));
        else
            for (int i : dwi_idx) fill_row(i);
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double cond = svd.singularValues()(0) /
                        svd.singularValues()(svd.singularValues().size() - 1);
    if (svd.rank() < cols || !std::isfinite(cond) || cond > 1e10) {
        std::ostringstream msg;
        msg << "tensor fit design matrix is rank-deficient (rank " << svd.rank() << " of " << cols
            << "); offending directions:";
        for (int i : dwi_idx) {
            const Vec3& g = table.directions[i];
            msg << " [" << g[0] << "," << g[1] << "," << g[2] << "]";
        }
        fail(ErrorKind::Conditioning, msg.str());
    }

    const Volume& vols = study.volumes;
    const size_t nvox = vols.nvox();

    // Mean b0 drives both the signal floor and, in the 6-unknown path, S0.
    Volume mean_b0(vols.nx, vols.ny, vols.nz, 1);
    mean_b0.pixdim = vols.pixdim;
    for (int i : b0_idx) {
        const double* src = vols.data.data() + static_cast<size_t>(i) * nvox;
        for (size_t v = 0; v < nvox; ++v) mean_b0.data[v] += src[v];
    }
    for (size_t v = 0; v < nvox; ++v) mean_b0.data[v] /= static_cast<double>(b0_idx.size());

    const double floor = opts.floor_rel * vols.max_value();

    FitResult res;
    res.field = TensorField(vols.nx, vols.ny, vols.nz);
    res.s0 = mean_b0;

    // Precompute the pseudoinverse once; the per-voxel solve is then a GEMV.
    Eigen::MatrixXd pinv = svd.solve(Eigen::MatrixXd::Identity(rows, rows));

    size_t masked = 0;
#pragma omp parallel for schedule(static) reduction(+ : masked)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        if (mean_b0.data[v] <= floor) {
            res.field.mask[v] = 0;
            res.field.tensors[v] = {};
            ++masked;
            continue;
        }
        Eigen::VectorXd rhs(rows);
        bool ok = true;
        for (int r = 0; r < rows; ++r) {
            double s = vols.data[static_cast<size_t>(row_vol[r]) * nvox + v];
            if (s <= 0.0) s = floor > 0.0 ? floor : 1e-12;
            rhs(r) = fit_s0 ? std::log(s) : std::log(s / mean_b0.data[v]);
            if (!std::isfinite(rhs(r))) ok = false;
        }
        if (!ok) {
            res.field.mask[v] = 0;
            res.field.tensors[v] = {};
            ++masked;
            continue;
        }
        Eigen::VectorXd x = pinv * rhs;
        DiffusionTensor& t = res.field.tensors[v];
        t.xx = x(0);
        t.yy = x(1);
        t.zz = x(2);
        t.xy = x(3);
        t.xz = x(4);
        t.yz = x(5);
        if (fit_s0) res.s0.data[v] = std::exp(x(6));
    }
    res.masked_out = masked;
    return res;
}

EigenSystem tensor_eigen(const DiffusionTensor& tensor) {
    const double comps[6] = {tensor.xx, tensor.yy, tensor.zz, tensor.xy, tensor.xz, tensor.yz};
    for (double c : comps)
        if (!std::isfinite(c)) fail(ErrorKind::Numeric, "tensor_eigen: non-finite tensor component");

    Eigen::Matrix3d m;
    m << tensor.xx, tensor.xy, tensor.xz,
         tensor.xy, tensor.yy, tensor.yz,
         tensor.xz, tensor.yz, tensor.zz;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(m);

    EigenSystem sys;
    // Solver returns ascending order; flip to descending.
    for (int i = 0; i < 3; ++i) {
        const int src = 2 - i;
        double lam = solver.eigenvalues()(src);
        if (lam < 0.0) {
            lam = 0.0;
            sys.clamped = true;
        }
        sys.lambda[i] = lam;
        for (int k = 0; k < 3; ++k) sys.vectors[i][k] = solver.eigenvectors()(k, src);
    }
    return sys;
}

} // namespace diffdti
