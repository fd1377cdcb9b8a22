#include "mfuse/partition.hpp"

#include <map>

#include "mfuse/error.hpp"

namespace mfuse {

PartitionMap::PartitionMap(std::vector<int> assignment, Index q) : q_(q) {
    if (assignment.empty()) throw InputError("partition must cover at least one source");
    if (q < 1) throw InputError("partition needs a positive coefficient count");
    std::map<int, int> relabel;
    assignment_.reserve(assignment.size());
    for (int label : assignment) {
        auto [it, inserted] = relabel.try_emplace(label, static_cast<int>(relabel.size()));
        assignment_.push_back(it->second);
    }
    groups_ = static_cast<int>(relabel.size());
}

PartitionMap PartitionMap::singletons(int sources, Index q) {
    std::vector<int> a(static_cast<std::size_t>(sources));
    for (int l = 0; l < sources; ++l) a[static_cast<std::size_t>(l)] = l;
    return PartitionMap(std::move(a), q);
}

PartitionMap PartitionMap::homogeneous(int sources, Index q) {
    return PartitionMap(std::vector<int>(static_cast<std::size_t>(sources), 0), q);
}

std::vector<std::vector<int>> PartitionMap::members() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(groups_));
    for (int l = 0; l < sources(); ++l) out[static_cast<std::size_t>(group_of(l))].push_back(l);
    return out;
}

MatrixXd PartitionMap::membership() const {
    MatrixXd pi = MatrixXd::Zero(sources(), groups_);
    for (int l = 0; l < sources(); ++l) pi(l, group_of(l)) = 1.0;
    return pi;
}

MatrixXd PartitionMap::expansion() const {
    MatrixXd pi = MatrixXd::Zero(sources() * q_, groups_ * q_);
    for (int l = 0; l < sources(); ++l)
        pi.block(l * q_, group_of(l) * q_, q_, q_).setIdentity();
    return pi;
}

VectorXd PartitionMap::expand(const VectorXd& theta) const {
    if (theta.size() != groups_ * q_) throw InputError("theta has the wrong dimension for this partition");
    VectorXd beta(sources() * q_);
    for (int l = 0; l < sources(); ++l) beta.segment(l * q_, q_) = theta.segment(group_of(l) * q_, q_);
    return beta;
}

std::string PartitionMap::signature() const {
    std::string out;
    for (int l = 0; l < sources(); ++l) {
        if (l) out += '-';
        out += std::to_string(group_of(l) + 1);
    }
    return out;
}

}  // namespace mfuse
