// Sparse real LU behind a small value-semantic facade: factor once per
// stage, solve once per series order.
#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <memory>
#include <stdexcept>
#include <string>

namespace helmpw {

struct SingularMatrixError : std::runtime_error {
    explicit SingularMatrixError(const std::string& what, int row_ = -1)
        : std::runtime_error(what), row(row_) {}
    int row;  // offending row when identifiable, else -1
};

/// Immutable LU factorization of a real sparse matrix (COLAMD ordering).
/// Move-only; solves against a factorization do not mutate it.
class FactoredSystem {
    using SpMat = Eigen::SparseMatrix<double>;
    using LU = Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>>;

public:
    static FactoredSystem factorize(const SpMat& a) {
        if (a.rows() != a.cols())
            throw std::invalid_argument("factorize: matrix not square");
        // structurally empty rows are the one singularity we can localize
        std::vector<char> row_used(static_cast<size_t>(a.rows()), 0);
        for (int k = 0; k < a.outerSize(); ++k)
            for (SpMat::InnerIterator it(a, k); it; ++it)
                if (it.value() != 0.0) row_used[static_cast<size_t>(it.row())] = 1;
        for (int r = 0; r < a.rows(); ++r)
            if (!row_used[static_cast<size_t>(r)])
                throw SingularMatrixError("factorize: row " + std::to_string(r) + " is empty", r);

        FactoredSystem f;
        f.dim_ = static_cast<int>(a.rows());
        f.lu_ = std::make_unique<LU>();
        SpMat ac = a;
        ac.makeCompressed();
        f.lu_->compute(ac);
        if (f.lu_->info() != Eigen::Success)
            throw SingularMatrixError("factorize: " + f.lu_->lastErrorMessage());
        f.norm_inf_ = infinity_norm(ac);
        f.cond_ = f.estimate_condition();
        return f;
    }

    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
        if (rhs.size() != dim_)
            throw std::invalid_argument("solve: rhs dimension mismatch");
        return lu_->solve(rhs);
    }

    int dimension() const { return dim_; }

    /// Order-of-magnitude estimate of the infinity-norm condition number,
    /// from fixed +-1 probe solves (deterministic).
    double condition_estimate() const { return cond_; }

private:
    FactoredSystem() = default;

    static double infinity_norm(const SpMat& a) {
        Eigen::VectorXd rowsum = Eigen::VectorXd::Zero(a.rows());
        for (int k = 0; k < a.outerSize(); ++k)
            for (SpMat::InnerIterator it(a, k); it; ++it)
                rowsum(it.row()) += std::abs(it.value());
        return a.rows() ? rowsum.maxCoeff() : 0.0;
    }

    double estimate_condition() const {
        double ainv = 0.0;
        for (int probe = 0; probe < 3; ++probe) {
            Eigen::VectorXd e(dim_);
            for (int i = 0; i < dim_; ++i)
                e(i) = ((i + probe) % (probe + 2) == 0) ? 1.0 : -1.0;
            Eigen::VectorXd x = lu_->solve(e);
            ainv = std::max(ainv, x.lpNorm<Eigen::Infinity>());
        }
        return norm_inf_ * ainv;
    }

    std::unique_ptr<LU> lu_;
    int dim_ = 0;
    double norm_inf_ = 0.0;
    double cond_ = 0.0;
};

}  // namespace helmpw
