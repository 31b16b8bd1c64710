#pragma once

// Exhaustive search over one-hot site assignments: the J^sites combinatorial
// baseline that learned gates replace, used as ground truth on small cases.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergenet.hpp"
#include "trainer.hpp"

namespace softmerge {

// Chosen model index per selected site.
using Assignment = std::vector<std::size_t>;

inline constexpr std::uint64_t kDefaultAssignmentCap = 4096;

class CapExceeded : public std::length_error {
public:
    using std::length_error::length_error;
};

inline std::uint64_t assignment_count(std::size_t models, std::size_t sites, std::uint64_t cap) {
    std::uint64_t n = 1;
    for (std::size_t i = 0; i < sites; ++i) {
        n *= models;
        if (n > cap)
            throw CapExceeded("enumerate_assignments: " + std::to_string(models) + "^" + std::to_string(sites) +
                              " exceeds cap " + std::to_string(cap));
    }
    return n;
}

// Forward range over all assignments in lexicographic order (last site
// varies fastest).
class AssignmentRange {
public:
    class iterator {
    public:
        using value_type = Assignment;
        using difference_type = std::ptrdiff_t;

        iterator() = default;
        iterator(std::size_t models, Assignment current, bool done)
            : models_(models), current_(std::move(current)), done_(done) {}

        const Assignment& operator*() const { return current_; }
        const Assignment* operator->() const { return &current_; }

        iterator& operator++() {
            std::size_t i = current_.size();
            while (i > 0) {
                --i;
                if (++current_[i] < models_) return *this;
                current_[i] = 0;
            }
            done_ = true;
            return *this;
        }
        iterator operator++(int) {
            auto old = *this;
            ++*this;
            return old;
        }
        bool operator==(const iterator& o) const { return done_ == o.done_ && (done_ || current_ == o.current_); }

    private:
        std::size_t models_ = 0;
        Assignment current_;
        bool done_ = true;
    };

    AssignmentRange(std::size_t models, std::size_t sites, std::uint64_t cap = kDefaultAssignmentCap)
        : models_(models), sites_(sites), count_(assignment_count(models, sites, cap)) {
        if (models == 0) throw std::invalid_argument("enumerate_assignments: J must be positive");
    }

    iterator begin() const { return iterator(models_, Assignment(sites_, 0), false); }
    iterator end() const { return iterator(models_, {}, true); }
    std::uint64_t size() const { return count_; }

private:
    std::size_t models_;
    std::size_t sites_;
    std::uint64_t count_;
};

inline AssignmentRange enumerate_assignments(const MergeSpec& spec, const ModelDef& def,
                                             std::uint64_t cap = kDefaultAssignmentCap) {
    return AssignmentRange(spec.models, resolve_sites(spec, def).size(), cap);
}

struct ScoredAssignment {
    Assignment assignment;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct OracleResult {
    Assignment best;
    double loss = 0.0;
    bool tie = false;  // another assignment reached exactly the same loss
    std::vector<ScoredAssignment> all;  // enumeration order
};

// Evaluates every assignment with one-hot deterministic gates and returns
// the argmin of validation loss; ties go to the lexicographically smallest.
inline OracleResult brute_force_best(const ModelZoo& zoo, const MergeSpec& spec, const Dataset& val,
                                     std::uint64_t cap = kDefaultAssignmentCap) {
    OracleResult out;
    bool first = true;
    for (const auto& a : enumerate_assignments(spec, zoo.front(), cap)) {
        const MergedModel m(zoo, spec, one_hot_bank(spec, zoo.front(), a), GateMode::Deterministic);
        const auto ev = evaluate(m, val);
        out.all.push_back({a, ev.loss, ev.accuracy});
        if (first || ev.loss < out.loss) {
            out.best = a;
            out.loss = ev.loss;
            out.tie = false;
            first = false;
        } else if (ev.loss == out.loss) {
            out.tie = true;
        }
    }
    return out;
}

inline std::string format_assignment(const Assignment& a) {
    std::ostringstream os;
    for (std::size_t i = 0; i < a.size(); ++i) os << (i ? "-" : "") << a[i];
    return os.str();
}

// Columns: assignment (dash-separated model indices), loss, accuracy.
inline std::string oracle_csv(const OracleResult& r) {
    std::ostringstream os;
    os << "assignment,loss,accuracy\n";
    for (const auto& s : r.all)
        os << format_assignment(s.assignment) << ',' << format_double(s.loss) << ',' << format_double(s.accuracy)
           << '\n';
    return os.str();
}

}  // namespace softmerge
