#include "diffdti/gradient_table.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace diffdti {

namespace {

std::vector<std::vector<double>> read_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open gradient file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::vector<double> row;
        double v;
        while (ss >> v) row.push_back(v);
        if (!row.empty()) rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace

size_t GradientTable::count_b0(double tol) const {
    size_t n = 0;
    for (double b : bvalues)
        if (b <= tol) ++n;
    return n;
}

size_t GradientTable::count_dwi(double tol) const { return size() - count_b0(tol); }

void GradientTable::validate() const {
    if (directions.size() != bvalues.size())
        fail(ErrorKind::Data, "gradient table: " + std::to_string(directions.size()) +
                                  " directions vs " + std::to_string(bvalues.size()) + " b-values");
    size_t n_dwi = 0;
    for (size_t i = 0; i < size(); ++i) {
        if (bvalues[i] < 0.0)
            fail(ErrorKind::Data, "gradient table: negative b-value at entry " + std::to_string(i));
        if (bvalues[i] > 0.0) {
            ++n_dwi;
            const Vec3& g = directions[i];
            double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
            if (std::fabs(norm - 1.0) > 1e-6)
                fail(ErrorKind::Data, "gradient table: direction " + std::to_string(i) +
                                          " has norm " + std::to_string(norm) + ", expected 1");
        }
    }
    if (n_dwi < 1) fail(ErrorKind::Data, "gradient table: no b>0 entries");
}

GradientTable gradient_table_load(const std::string& bval_path, const std::string& bvec_path) {
    auto bval_rows = read_rows(bval_path);
    if (bval_rows.size() != 1)
        fail(ErrorKind::Data, "bval file must contain exactly one row of values: " + bval_path);
    auto bvec_rows = read_rows(bvec_path);
    if (bvec_rows.size() != 3)
        fail(ErrorKind::Data, "bvec file must contain three rows (x, y, z): " + bvec_path);

    const size_t n = bval_rows[0].size();
    for (int axis = 0; axis < 3; ++axis)
        if (bvec_rows[axis].size() != n)
            fail(ErrorKind::Data, "bvec row " + std::to_string(axis) + " has " +
                                      std::to_string(bvec_rows[axis].size()) + " entries, bvals has " +
                                      std::to_string(n));

    GradientTable table;
    table.bvalues = bval_rows[0];
    table.directions.resize(n);
    for (size_t i = 0; i < n; ++i)
        table.directions[i] = {bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]};
    table.validate();
    return table;
}

void gradient_table_save(const GradientTable& table, const std::string& bval_path,
                         const std::string& bvec_path) {
    std::ofstream bval(bval_path);
    if (!bval) fail(ErrorKind::Io, "cannot write " + bval_path);
    for (size_t i = 0; i < table.size(); ++i)
        bval << (i ? " " : "") << table.bvalues[i];
    bval << "\n";

    std::ofstream bvec(bvec_path);
    if (!bvec) fail(ErrorKind::Io, "cannot write " + bvec_path);
    bvec.precision(17);
    for (int axis = 0; axis < 3; ++axis) {
        for (size_t i = 0; i < table.size(); ++i)
            bvec << (i ? " " : "") << table.directions[i][axis];
        bvec << "\n";
    }
}

void DwiStudy::validate() const {
    table.validate();
    if (static_cast<size_t>(volumes.nt) != table.size())
        fail(ErrorKind::Data, "study has " + std::to_string(volumes.nt) + " volumes but table has " +
                                  std::to_string(table.size()) + " entries");
}

} // namespace diffdti
