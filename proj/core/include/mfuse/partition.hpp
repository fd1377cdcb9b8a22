#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

namespace mfuse {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Assignment of the J*K sources (linear index k*J + j) to G groups.
///
/// Groups are always numbered canonically: group 0 contains source 0, and each
/// subsequent group is numbered in order of its smallest member.
class PartitionMap {
public:
    PartitionMap() = default;

    /// assignment[l] is an arbitrary label for source l; labels are
    /// renumbered canonically. q is the per-source coefficient count.
    PartitionMap(std::vector<int> assignment, Index q);

    static PartitionMap singletons(int sources, Index q);
    static PartitionMap homogeneous(int sources, Index q);

    int sources() const noexcept { return static_cast<int>(assignment_.size()); }
    int groups() const noexcept { return groups_; }
    Index covariates() const noexcept { return q_; }
    int group_of(int source) const { return assignment_[static_cast<std::size_t>(source)]; }
    const std::vector<int>& assignment() const noexcept { return assignment_; }

    /// Members of each group in ascending source order.
    std::vector<std::vector<int>> members() const;

    /// (JK) x G 0/1 membership matrix.
    MatrixXd membership() const;
    /// (JKq) x (Gq) expansion so that beta = expansion() * theta.
    MatrixXd expansion() const;
    /// Replicates theta_g into every member source.
    VectorXd expand(const VectorXd& theta) const;

    /// Compact signature such as "1-1-2-3" (1-based group per source).
    std::string signature() const;

    friend bool operator==(const PartitionMap& a, const PartitionMap& b) {
        return a.q_ == b.q_ && a.assignment_ == b.assignment_;
    }

private:
    std::vector<int> assignment_;
    int groups_ = 0;
    Index q_ = 0;
};

}  // namespace mfuse
