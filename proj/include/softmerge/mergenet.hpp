#pragma once

// Soft-merged network: J frozen models whose outputs are gated and summed at
// merge sites (whole model, module group or dense layer). Only gate
// parameters are ever trainable.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hardconcrete.hpp"
#include "netgraph.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace softmerge {

enum class Level { Model, Module, Layer };

inline const char* to_string(Level l) {
    switch (l) {
        case Level::Model: return "model";
        case Level::Module: return "module";
        case Level::Layer: return "layer";
    }
    return "?";
}

class MergeSpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline Level parse_level(const std::string& s) {
    if (s == "model") return Level::Model;
    if (s == "module") return Level::Module;
    if (s == "layer") return Level::Layer;
    throw MergeSpecError("unknown merge level '" + s + "' (expected model|module|layer)");
}

enum class GateMode { Stochastic, Deterministic };

// How a model-level site turns gated outputs into the task loss:
// Combined evaluates L(sum_j g_j M_j(X)); PerModelSum evaluates sum_j L(g_j M_j(X)).
enum class ModelLevelLoss { Combined, PerModelSum };

struct MergeSpec {
    Level level = Level::Model;
    std::size_t models = 1;          // J
    std::size_t prime = 0;           // fills every non-selected site
    bool selective = false;
    std::vector<std::size_t> sites;  // used when selective

    static MergeSpec full(Level level, std::size_t models) { return {level, models, 0, false, {}}; }
    static MergeSpec select(Level level, std::size_t models, std::vector<std::size_t> sites, std::size_t prime) {
        return {level, models, prime, true, std::move(sites)};
    }
};

// A mergeable position and the contiguous layer range it spans.
struct SiteRange {
    std::size_t site = 0;
    std::size_t first = 0;
    std::size_t last = 0;
};

// Every candidate site at the spec's level. Layer-level sites are the layers
// that carry weights; weightless layers are identical across the zoo.
inline std::vector<SiteRange> candidate_sites(Level level, const ModelDef& def) {
    std::vector<SiteRange> out;
    switch (level) {
        case Level::Model: out.push_back({0, 0, def.layer_count() - 1}); break;
        case Level::Module:
            for (std::size_t m = 0; m < def.module_count(); ++m)
                out.push_back({m, def.modules()[m].first, def.modules()[m].last});
            break;
        case Level::Layer:
            for (std::size_t l = 0; l < def.layer_count(); ++l)
                if (def.layer(l).has_weights()) out.push_back({l, l, l});
            break;
    }
    return out;
}

// Validates the spec against an architecture and returns the selected sites
// in ascending order.
inline std::vector<SiteRange> resolve_sites(const MergeSpec& spec, const ModelDef& def) {
    if (spec.models == 0) throw MergeSpecError("MergeSpec: zoo is empty");
    if (spec.prime >= spec.models)
        throw MergeSpecError("MergeSpec: prime model " + std::to_string(spec.prime) + " out of range for J=" +
                             std::to_string(spec.models));
    auto all = candidate_sites(spec.level, def);
    if (!spec.selective) return all;
    if (spec.sites.empty()) throw MergeSpecError("MergeSpec: selective merging needs at least one site");
    auto wanted = spec.sites;
    std::sort(wanted.begin(), wanted.end());
    if (std::adjacent_find(wanted.begin(), wanted.end()) != wanted.end())
        throw MergeSpecError("MergeSpec: duplicate site index");
    std::vector<SiteRange> out;
    for (auto s : wanted) {
        auto it = std::find_if(all.begin(), all.end(), [s](const SiteRange& r) { return r.site == s; });
        if (it == all.end())
            throw MergeSpecError("MergeSpec: site " + std::to_string(s) + " is not a valid " + to_string(spec.level) +
                                 "-level site");
        out.push_back(*it);
    }
    return out;
}

struct SiteGates {
    std::size_t site = 0;
    std::vector<GateParams> gates;  // one per model
};

// Gate parameters for every selected site; non-selected sites carry an
// implicit constant gate of 1 on the prime model.
class GateBank {
public:
    GateBank() = default;
    explicit GateBank(std::vector<SiteGates> sites) : sites_(std::move(sites)) {}

    std::size_t site_count() const { return sites_.size(); }
    std::size_t model_count() const { return sites_.empty() ? 0 : sites_.front().gates.size(); }
    std::size_t gate_count() const { return site_count() * model_count(); }

    SiteGates& operator[](std::size_t i) { return sites_.at(i); }
    const SiteGates& operator[](std::size_t i) const { return sites_.at(i); }
    const std::vector<SiteGates>& sites() const { return sites_; }

    std::vector<double> log_alphas() const {
        std::vector<double> out;
        for (const auto& s : sites_)
            for (const auto& g : s.gates) out.push_back(g.log_alpha);
        return out;
    }

    bool operator==(const GateBank& o) const {
        if (sites_.size() != o.sites_.size()) return false;
        for (std::size_t i = 0; i < sites_.size(); ++i) {
            if (sites_[i].site != o.sites_[i].site || sites_[i].gates.size() != o.sites_[i].gates.size()) return false;
            for (std::size_t j = 0; j < sites_[i].gates.size(); ++j) {
                const auto& a = sites_[i].gates[j];
                const auto& b = o.sites_[i].gates[j];
                if (a.log_alpha != b.log_alpha || a.raw_beta != b.raw_beta || a.gamma() != b.gamma() ||
                    a.zeta() != b.zeta())
                    return false;
            }
        }
        return true;
    }

private:
    std::vector<SiteGates> sites_;
};

// log_alpha ~ N(0, sigma^2) per (site, model), drawn site-major; beta, gamma,
// zeta at their defaults.
inline GateBank init_gates(const MergeSpec& spec, const ModelDef& def, std::uint64_t seed, double sigma_init) {
    if (sigma_init < 0.0) throw MergeSpecError("init_gates: sigma_init must be >= 0");
    Rng rng(seed);
    std::vector<SiteGates> sites;
    for (const auto& r : resolve_sites(spec, def)) {
        SiteGates sg{r.site, {}};
        for (std::size_t j = 0; j < spec.models; ++j) sg.gates.emplace_back(sigma_init * rng.normal());
        sites.push_back(std::move(sg));
    }
    return GateBank(std::move(sites));
}

// Bank whose deterministic gates are exactly one-hot: assignment[i] is the
// chosen model at selected site i.
inline GateBank one_hot_bank(const MergeSpec& spec, const ModelDef& def, std::span<const std::size_t> assignment) {
    const auto ranges = resolve_sites(spec, def);
    if (assignment.size() != ranges.size())
        throw MergeSpecError("one_hot_bank: assignment has " + std::to_string(assignment.size()) + " entries for " +
                             std::to_string(ranges.size()) + " sites");
    constexpr double kSaturated = 50.0;  // logistic(50) rounds to 1.0
    std::vector<SiteGates> sites;
    for (std::size_t i = 0; i < ranges.size(); ++i) {
        if (assignment[i] >= spec.models) throw MergeSpecError("one_hot_bank: model index out of range");
        SiteGates sg{ranges[i].site, {}};
        for (std::size_t j = 0; j < spec.models; ++j)
            sg.gates.emplace_back(j == assignment[i] ? kSaturated : -kSaturated);
        sites.push_back(std::move(sg));
    }
    return GateBank(std::move(sites));
}

class MergedModel {
public:
    MergedModel(const ModelZoo& zoo, MergeSpec spec, GateBank bank, GateMode mode = GateMode::Deterministic)
        : zoo_(&zoo), spec_(std::move(spec)), bank_(std::move(bank)), mode_(mode) {
        if (spec_.models != zoo.size())
            throw MergeSpecError("MergedModel: spec expects J=" + std::to_string(spec_.models) + " but zoo has " +
                                 std::to_string(zoo.size()));
        ranges_ = resolve_sites(spec_, zoo.front());
        if (bank_.site_count() != ranges_.size() || bank_.model_count() != zoo.size())
            throw MergeSpecError("MergedModel: gate bank shape does not match the selected sites");
        for (std::size_t i = 0; i < ranges_.size(); ++i)
            if (bank_[i].site != ranges_[i].site) throw MergeSpecError("MergedModel: gate bank site order mismatch");
    }

    const ModelZoo& zoo() const { return *zoo_; }
    const MergeSpec& spec() const { return spec_; }
    const GateBank& bank() const { return bank_; }
    GateBank& bank() { return bank_; }
    GateMode mode() const { return mode_; }
    void set_mode(GateMode m) { mode_ = m; }
    const std::vector<SiteRange>& ranges() const { return ranges_; }

    ModelLevelLoss model_level_loss = ModelLevelLoss::Combined;
    bool train_beta = false;

private:
    const ModelZoo* zoo_;
    MergeSpec spec_;
    GateBank bank_;
    GateMode mode_;
    std::vector<SiteRange> ranges_;
};

// Gate Vars recorded for one forward pass, indexed [site][model], together
// with the parameter leaves they were drawn from.
struct GateVars {
    std::vector<std::vector<Var>> gate;
    std::vector<std::vector<Var>> log_alpha;
    std::vector<std::vector<Var>> raw_beta;
};

// Records one gate per (site, model). Stochastic mode consumes exactly one
// uniform per gate, site-major then ascending model.
inline GateVars record_gates(Tape& tape, const MergedModel& m, Rng* rng) {
    GateVars out;
    const auto& bank = m.bank();
    for (std::size_t i = 0; i < bank.site_count(); ++i) {
        auto& gates = out.gate.emplace_back();
        auto& las = out.log_alpha.emplace_back();
        auto& rbs = out.raw_beta.emplace_back();
        for (const auto& p : bank[i].gates) {
            const Var la = tape.leaf(Tensor::scalar(p.log_alpha), true);
            const Var rb = tape.leaf(Tensor::scalar(p.raw_beta), m.train_beta);
            GateDraw draw;
            if (m.mode() == GateMode::Stochastic) {
                if (rng == nullptr) throw std::invalid_argument("forward_merged: stochastic mode needs an Rng");
                draw = sample_gate_with_grad(p, rng->uniform_open());
            } else {
                draw = deterministic_gate_with_grad(p);
            }
            gates.push_back(tape.record(Tensor::scalar(draw.value), {la, rb}, [la, rb, draw](Tape& t, const Tensor& g) {
                if (la.requires_grad()) t.grad_buffer(la)[0] += g[0] * draw.d_log_alpha;
                if (rb.requires_grad()) t.grad_buffer(rb)[0] += g[0] * draw.d_raw_beta;
            }));
            las.push_back(la);
            rbs.push_back(rb);
        }
    }
    return out;
}

namespace detail {

// sum_j g_j * branch_j in ascending j. Branches whose gate is exactly 0 are
// never evaluated, so a non-finite branch cannot leak into the sum; a lone
// active branch with gate exactly 1 is returned untouched.
template <class Branch>
Var gated_sum(Tape& tape, std::span<const Var> gates, Branch&& branch, const Shape& out_shape) {
    std::vector<std::pair<std::size_t, Var>> active;
    for (std::size_t j = 0; j < gates.size(); ++j)
        if (gates[j].value()[0] != 0.0) active.emplace_back(j, branch(j));
    if (active.empty()) return tape.constant(Tensor(out_shape));
    if (active.size() == 1 && gates[active[0].first].value()[0] == 1.0) return active[0].second;
    std::optional<Var> acc;
    for (const auto& [j, y] : active) {
        const Var term = scale(y, gates[j]);
        acc = acc ? add(*acc, term) : term;
    }
    return *acc;
}

inline Shape batch_shape(std::size_t batch, const Shape& features) {
    Shape s{batch};
    s.insert(s.end(), features.begin(), features.end());
    return s;
}

}  // namespace detail

// Output of the merged network for a batch already recorded on `x`'s tape.
inline Var forward_merged(const MergedModel& m, const Var& x, const GateVars& gates) {
    const auto& zoo = m.zoo();
    const auto& def = zoo.front();
    check_input(def, x.value());
    auto& tape = x.tape();
    const std::size_t batch = x.value().dim(0);

    if (m.spec().level == Level::Model) {
        return detail::gated_sum(
            tape, gates.gate.at(0), [&](std::size_t j) { return forward(zoo[j], x); },
            detail::batch_shape(batch, def.output_shape()));
    }

    const auto& prime = zoo[m.spec().prime];
    const auto& ranges = m.ranges();
    Var h = x;
    std::size_t layer = 0;
    std::size_t next_site = 0;
    while (layer < def.layer_count()) {
        if (next_site < ranges.size() && ranges[next_site].first == layer) {
            const auto r = ranges[next_site];
            const Var in = h;
            h = detail::gated_sum(
                tape, gates.gate.at(next_site),
                [&](std::size_t j) { return apply_layers(zoo[j], r.first, r.last, in); },
                detail::batch_shape(batch, def.layer(r.last).output_shape()));
            layer = r.last + 1;
            ++next_site;
        } else {
            h = apply_layer(prime.layer(layer), h);
            ++layer;
        }
    }
    return h;
}

// Convenience: records gates and the merged forward on a fresh tape.
inline Tensor forward_merged(const MergedModel& m, const Tensor& x, Rng* rng = nullptr) {
    Tape tape;
    const auto gates = record_gates(tape, m, rng);
    return forward_merged(m, tape.constant(x), gates).value();
}

// lambda * (sum of gates - T), T = number of sites (unit gate mass per site).
inline Var penalty(const GateVars& gates, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("penalty: lambda must be >= 0");
    std::vector<Var> all;
    for (const auto& site : gates.gate) all.insert(all.end(), site.begin(), site.end());
    if (all.empty()) throw std::invalid_argument("penalty: no gates");
    const double target = static_cast<double>(gates.gate.size());
    return affine(sum_scalars(all), lambda, -lambda * target);
}

struct MergedLoss {
    Var total;
    Var task;
    Var penalty;
    GateVars gates;
};

// Task loss (softmax cross-entropy) on the merged output plus lambda * penalty.
inline MergedLoss merged_loss(const MergedModel& m, Tape& tape, const Tensor& x, std::span<const std::size_t> labels,
                              double lambda, Rng* rng) {
    MergedLoss out;
    out.gates = record_gates(tape, m, rng);
    const Var xv = tape.constant(x);
    if (m.spec().level == Level::Model && m.model_level_loss == ModelLevelLoss::PerModelSum) {
        std::vector<Var> losses;
        for (std::size_t j = 0; j < m.zoo().size(); ++j) {
            const Var gate = out.gates.gate[0][j];
            if (gate.value()[0] == 0.0) {
                // L(0 * M_j(X)) is the loss of all-zero logits; constant in the gate.
                losses.push_back(softmax_cross_entropy(
                    tape.constant(Tensor(detail::batch_shape(x.dim(0), m.zoo().front().output_shape()))), labels));
                continue;
            }
            losses.push_back(softmax_cross_entropy(scale(forward(m.zoo()[j], xv), gate), labels));
        }
        out.task = sum_scalars(losses);
    } else {
        out.task = softmax_cross_entropy(forward_merged(m, xv, out.gates), labels);
    }
    out.penalty = penalty(out.gates, lambda);
    out.total = add(out.task, out.penalty);
    return out;
}

// d loss / d (log_alpha, raw_beta) per gate, [site][model]; valid after backward.
struct GateGradient {
    std::vector<std::vector<double>> log_alpha;
    std::vector<std::vector<double>> raw_beta;
};

inline GateGradient gate_gradients(const Tape& tape, const GateVars& gates) {
    GateGradient out;
    for (std::size_t i = 0; i < gates.log_alpha.size(); ++i) {
        auto& la = out.log_alpha.emplace_back();
        auto& rb = out.raw_beta.emplace_back();
        for (std::size_t j = 0; j < gates.log_alpha[i].size(); ++j) {
            la.push_back(tape.grad(gates.log_alpha[i][j])[0]);
            rb.push_back(tape.grad(gates.raw_beta[i][j])[0]);
        }
    }
    return out;
}

struct Winner {
    std::size_t model = 0;
    bool tie = false;  // another model shares the winning deterministic gate value
};

// argmax_j deterministic_gate. Equal gates (e.g. several saturated at 1) are
// ordered by log_alpha, then by lowest model index.
inline Winner extract_winner(const GateBank& bank, std::size_t site_index) {
    const auto& gates = bank[site_index].gates;
    Winner w;
    double best_gate = deterministic_gate(gates.at(0));
    double best_la = gates[0].log_alpha;
    for (std::size_t j = 1; j < gates.size(); ++j) {
        const double g = deterministic_gate(gates[j]);
        if (g > best_gate || (g == best_gate && gates[j].log_alpha > best_la)) {
            best_gate = g;
            best_la = gates[j].log_alpha;
            w.model = j;
        }
    }
    for (std::size_t j = 0; j < gates.size(); ++j)
        if (j != w.model && deterministic_gate(gates[j]) == best_gate) w.tie = true;
    return w;
}

// Single concrete model: each selected site taken from its winner, the prime
// model everywhere else.
inline ModelDef finalize(const MergedModel& m) {
    const auto& zoo = m.zoo();
    if (m.spec().level == Level::Model) return zoo[extract_winner(m.bank(), 0).model];
    ModelDef out = zoo[m.spec().prime];
    for (std::size_t i = 0; i < m.ranges().size(); ++i) {
        const auto& r = m.ranges()[i];
        const auto& src = zoo[extract_winner(m.bank(), i).model];
        for (std::size_t l = r.first; l <= r.last; ++l) out.mutable_layer(l) = src.layer(l);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV: site,model,log_alpha,beta

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string gate_bank_csv(const GateBank& bank) {
    std::ostringstream os;
    os << "site,model,log_alpha,beta\n";
    for (const auto& s : bank.sites())
        for (std::size_t j = 0; j < s.gates.size(); ++j)
            os << s.site << ',' << j << ',' << format_double(s.gates[j].log_alpha) << ','
               << format_double(s.gates[j].beta()) << '\n';
    return os.str();
}

inline GateBank parse_gate_bank_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "site,model,log_alpha,beta")
        throw std::runtime_error("gate bank csv: unexpected header");
    std::vector<SiteGates> sites;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string f[4];
        for (auto& x : f)
            if (!std::getline(row, x, ',')) throw std::runtime_error("gate bank csv: short row '" + line + "'");
        const auto site = static_cast<std::size_t>(std::stoull(f[0]));
        const auto model = static_cast<std::size_t>(std::stoull(f[1]));
        if (sites.empty() || sites.back().site != site) sites.push_back({site, {}});
        if (model != sites.back().gates.size()) throw std::runtime_error("gate bank csv: rows out of order");
        sites.back().gates.emplace_back(std::stod(f[2]), std::stod(f[3]));
    }
    return GateBank(std::move(sites));
}

}  // namespace softmerge
