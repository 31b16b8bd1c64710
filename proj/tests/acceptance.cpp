// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "softmerge/oracle.hpp"
#include "softmerge/trainer.hpp"
#include "support/gradcheck.hpp"

using namespace softmerge;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Every zoo checksum recorded before a training run in criteria 4-7 and
// compared after it.
struct ChecksumLedger {
    std::size_t runs = 0;
    std::size_t mismatches = 0;

    TrainResult train(const ModelZoo& zoo, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
        const auto before = zoo.checksums();
        auto result = train_gates(zoo, train, val, cfg);
        ++runs;
        mismatches += zoo.checksums() != before;
        return result;
    }
};

ChecksumLedger ledger;

Tensor random_tensor(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.normal();
    return t;
}

// ---------------------------------------------------------------------------

Outcome distribution_constants() {
    const double want[2][2] = {{0.8583, 0.0148}, {0.2317, 0.2317}};
    const double las[2] = {-3.0, 0.0};
    bool ok = true;
    std::string detail;
    for (int i = 0; i < 2; ++i) {
        const GateParams p(las[i]);
        const double z = prob_zero(p), o = prob_one(p);
        ok = ok && std::abs(z - want[i][0]) <= 5e-4 && std::abs(o - want[i][1]) <= 5e-4;
        detail += fmt("log_alpha=%g: P0=%.5f P1=%.5f  ", las[i], z, o);
    }
    return {ok, detail};
}

Outcome sampling_consistency() {
    bool ok = true;
    std::string detail;
    for (double la : {-3.0, 0.0}) {
        const GateParams p(la);
        const int n = 100000;
        Rng rng(2024 + static_cast<std::uint64_t>(la + 10));
        std::vector<double> xs(n);
        for (auto& x : xs) x = sample_concrete(p, rng.uniform_open());
        std::sort(xs.begin(), xs.end());
        double ks = 0.0;
        for (int i = 0; i < n; ++i) {
            if (xs[i] <= 0.0 || xs[i] >= 1.0) continue;
            const double f = concrete_cdf(xs[i], p);
            ks = std::max({ks, std::abs(f - double(i) / n), std::abs(f - double(i + 1) / n)});
        }
        int zeros = 0;
        for (int i = 0; i < n; ++i) zeros += sample_gate(p, rng) == 0.0;
        const double p0 = prob_zero(p);
        const double sigma = std::sqrt(p0 * (1 - p0) / n);
        const double dev = std::abs(zeros / double(n) - p0) / sigma;
        ok = ok && ks < 0.01 && dev < 3.0;
        detail += fmt("log_alpha=%g: KS=%.4f P0 dev=%.2f sigma  ", la, ks, dev);
    }
    return {ok, detail};
}

Outcome gradient_suite() {
    using testing::gradcheck;
    double worst_op = 0.0, worst_gate = 0.0, worst_merged = 0.0;
    std::size_t merged_checks = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
        const auto target = random_tensor({m, n}, rng);
        const auto loss = [&](const Var& y) { return mse(y, target); };
        auto away = [&](const Shape& s) {
            auto t = random_tensor(s, rng);
            for (auto& v : t.data()) v += v >= 0 ? 0.1 : -0.1;
            return t;
        };
        std::vector<std::size_t> labels(m);
        for (auto& l : labels) l = rng.below(n);
        const double errs[] = {
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(matmul(v[0], v[1])); },
                      {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(add_bias(v[0], v[1])); },
                      {random_tensor({m, n}, rng), random_tensor({n}, rng)}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(relu(v[0])); }, {away({m, n})}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(scale(v[0], v[1])); },
                      {random_tensor({m, n}, rng), random_tensor({1}, rng)}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(add(v[0], v[1])); },
                      {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return loss(flatten(v[0])); },
                      {random_tensor({m, n}, rng)}),
            gradcheck(
                [&](Tape&, const std::vector<Var>& v) {
                    const std::vector<Var> parts{sum(v[0]), sum(v[1])};
                    return affine(sum_scalars(parts), 1.5, -2.0);
                },
                {random_tensor({m, n}, rng), random_tensor({k}, rng)}),
            gradcheck([&](Tape&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); },
                      {random_tensor({m, n}, rng)}),
        };
        for (double e : errs) worst_op = std::max(worst_op, e);

        // reparameterized gate sample, away from the clamp
        for (int tries = 0; tries < 1000; ++tries) {
            const double u = rng.uniform_open();
            const GateParams p(rng.uniform(-3.0, 3.0), rng.uniform(0.2, 0.9));
            const double sbar = stretch(sample_concrete(p, u), p);
            if (sbar < 0.01 || sbar > 0.99) continue;
            const auto draw = sample_gate_with_grad(p, u);
            const double h = 1e-6;
            auto plus = p, minus = p;
            plus.log_alpha += h;
            minus.log_alpha -= h;
            const double fd_la = (sample_gate(plus, u) - sample_gate(minus, u)) / (2 * h);
            plus = minus = p;
            plus.raw_beta += h;
            minus.raw_beta -= h;
            const double fd_rb = (sample_gate(plus, u) - sample_gate(minus, u)) / (2 * h);
            const double num = std::hypot(draw.d_log_alpha - fd_la, draw.d_raw_beta - fd_rb);
            worst_gate = std::max(worst_gate, num / std::max(std::hypot(fd_la, fd_rb), 1e-8));
            break;
        }

        // merged_loss end to end with the noise replayed on both sides
        std::vector<ModelDef> defs;
        for (int j = 0; j < 2; ++j) {
            auto def = split_modules(mlp_architecture(4, {6, 5}, 3), 2);
            initialize_weights(def, rng);
            for (std::size_t l = 0; l < def.layer_count(); ++l)
                if (def.layer(l).kind == LayerKind::Dense)
                    for (auto& b : def.mutable_layer(l).bias.data()) b = 0.1 * rng.normal();
            defs.push_back(def);
        }
        const ModelZoo zoo(defs);
        const auto x = random_tensor({6, 4}, rng);
        std::vector<std::size_t> ys(6);
        for (auto& y : ys) y = rng.below(3);
        const Level level = std::array{Level::Model, Level::Module, Level::Layer}[seed % 3];
        const auto spec = MergeSpec::full(level, 2);
        for (std::uint64_t noise = 0; noise < 5000; ++noise) {
            MergedModel mm(zoo, spec, init_gates(spec, zoo.front(), seed * 7919 + noise, 0.5), GateMode::Stochastic);
            mm.train_beta = true;
            auto value_at = [&](const MergedModel& at) {
                Tape tape;
                Rng r(noise);
                return merged_loss(at, tape, x, ys, 2.0, &r).total.value()[0];
            };
            Tape tape;
            Rng r(noise);
            const auto out = merged_loss(mm, tape, x, ys, 2.0, &r);
            bool interior = true;
            for (const auto& site : out.gates.gate)
                for (const auto& g : site) interior = interior && g.value()[0] > 0.02 && g.value()[0] < 0.98;
            if (!interior) continue;
            tape.backward(out.total);
            const auto grads = gate_gradients(tape, out.gates);
            double diff2 = 0.0, norm2 = 0.0;
            const double h = 1e-6;
            for (std::size_t i = 0; i < mm.bank().site_count(); ++i)
                for (std::size_t j = 0; j < 2; ++j)
                    for (bool beta : {false, true}) {
                        auto plus = mm, minus = mm;
                        (beta ? plus.bank()[i].gates[j].raw_beta : plus.bank()[i].gates[j].log_alpha) += h;
                        (beta ? minus.bank()[i].gates[j].raw_beta : minus.bank()[i].gates[j].log_alpha) -= h;
                        const double fd = (value_at(plus) - value_at(minus)) / (2 * h);
                        const double an = beta ? grads.raw_beta[i][j] : grads.log_alpha[i][j];
                        diff2 += (an - fd) * (an - fd);
                        norm2 += fd * fd;
                    }
            worst_merged = std::max(worst_merged, std::sqrt(diff2) / std::max(std::sqrt(norm2), 1e-8));
            ++merged_checks;
            break;
        }
    }
    const bool ok = worst_op < 1e-5 && worst_gate < 1e-5 && worst_merged < 1e-4 && merged_checks == 50;
    return {ok, fmt("worst op rel err %.2e, gate sample %.2e, merged_loss %.2e over %zu seeds", worst_op, worst_gate,
                    worst_merged, merged_checks)};
}

// ---------------------------------------------------------------------------

Outcome model_level_staircase() {
    int passes = 0;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto train = gen_blobs(4, 8, 800, 5.0, 100 + seed);
        const auto val = gen_blobs(4, 8, 400, 5.0, 200 + seed).with_split(Split::Val);
        const auto arch = mlp_architecture(8, {16}, 4);
        const std::size_t ladder[10] = {0, 0, 1, 1, 2, 3, 4, 6, 10, 40};
        std::vector<ModelDef> defs;
        for (std::size_t j = 0; j < 10; ++j) {
            auto m = train_base_model(arch, train, seed * 100 + j, {ladder[j], 0.002, 32});
            if (j < 2) m = corrupt_model(m, {CorruptionMode::Randomize}, seed * 100 + j);
            defs.push_back(m);
        }
        Rng perm(seed);
        perm.shuffle(defs.begin(), defs.end());
        const ModelZoo zoo(defs);
        std::vector<double> acc;
        std::size_t best = 0;
        for (std::size_t j = 0; j < 10; ++j) {
            acc.push_back(evaluate(zoo[j], val).accuracy);
            if (acc[j] > acc[best]) best = j;
        }
        TrainConfig cfg;
        cfg.lr = 0.005;
        cfg.lambda = 1.0;
        cfg.epochs = 300;
        cfg.seed = seed;
        cfg.spec = MergeSpec::full(Level::Model, 10);
        const auto result = ledger.train(zoo, train, val, cfg);
        const auto las = result.bank.log_alphas();
        const auto winner = extract_winner(result.bank, 0).model;
        const auto top = static_cast<std::size_t>(std::max_element(las.begin(), las.end()) - las.begin());
        const double merged = evaluate(MergedModel(zoo, cfg.spec, result.bank), val).accuracy;
        const bool ok = winner == best && top == best && std::abs(merged - acc[best]) <= 0.01;
        passes += ok;
        detail += fmt("[s%llu %s best=%.3f merged=%.3f] ", static_cast<unsigned long long>(seed), ok ? "ok" : "x",
                      acc[best], merged);
    }
    return {passes >= 9, fmt("%d/10 seeds ", passes) + detail};
}

Outcome module_level_halves() {
    int passes = 0;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto train = gen_blobs(16, 32, 800, 20.0, 300 + seed);
        const auto val = gen_blobs(16, 32, 400, 20.0, 400 + seed).with_split(Split::Val);
        const auto arch = split_modules(mlp_architecture(32, {64, 64}, 16), 2);
        const std::size_t good = seed % 3;
        std::vector<ModelDef> defs;
        for (std::size_t j = 0; j < 3; ++j)
            defs.push_back(train_base_model(arch, train, seed * 10 + j, {j == good ? 50u : 0u, 0.05, 32}));
        const ModelZoo zoo(defs);
        const double good_acc = evaluate(zoo[good], val).accuracy;
        TrainConfig cfg;
        cfg.lr = 0.001;
        cfg.lambda = 5.0;
        cfg.epochs = 100;
        cfg.seed = seed;
        cfg.spec = MergeSpec::full(Level::Module, 3);
        const auto result = ledger.train(zoo, train, val, cfg);
        const double merged = evaluate(MergedModel(zoo, cfg.spec, result.bank), val).accuracy;
        const bool ok = extract_winner(result.bank, 0).model == good && extract_winner(result.bank, 1).model == good &&
                        merged >= good_acc - 0.01;
        passes += ok;
        detail += fmt("[s%llu %s trained=%.3f merged=%.3f] ", static_cast<unsigned long long>(seed), ok ? "ok" : "x",
                      good_acc, merged);
    }
    return {passes >= 8, fmt("%d/10 seeds ", passes) + detail};
}

Outcome oracle_equivalence() {
    int passes = 0;
    bool eight = true;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto train = gen_blobs(4, 8, 800, 5.0, 500 + seed);
        const auto val = gen_blobs(4, 8, 400, 5.0, 600 + seed).with_split(Split::Val);
        const auto arch = mlp_architecture(8, {16, 16}, 4);
        std::vector<ModelDef> defs{train_base_model(arch, train, seed * 7, {50, 0.05, 32}),
                                   train_base_model(arch, train, seed * 7 + 1, {1, 0.05, 32})};
        if (seed % 2) std::swap(defs[0], defs[1]);
        const ModelZoo zoo(defs);
        const auto spec = MergeSpec::full(Level::Layer, 2);
        const auto oracle = brute_force_best(zoo, spec, val);
        eight = eight && oracle.all.size() == 8;
        TrainConfig cfg;
        cfg.lr = 0.005;
        cfg.lambda = 0.1;
        cfg.epochs = 150;
        cfg.seed = seed;
        cfg.spec = spec;
        const auto result = ledger.train(zoo, train, val, cfg);
        const double loss = evaluate(finalize(MergedModel(zoo, spec, result.bank)), val).loss;
        const bool ok = loss <= oracle.loss * 1.02;
        passes += ok;
        detail += fmt("[s%llu %s oracle=%.4f final=%.4f] ", static_cast<unsigned long long>(seed), ok ? "ok" : "x",
                      oracle.loss, loss);
    }
    return {passes >= 8 && eight, fmt("%d/10 seeds, 8 assignments each: %s ", passes, eight ? "yes" : "no") + detail};
}

Outcome robustness() {
    int passes = 0;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto train = gen_blobs(4, 8, 800, 5.0, 700 + seed);
        const auto val = gen_blobs(4, 8, 400, 5.0, 800 + seed).with_split(Split::Val);
        const auto arch = mlp_architecture(8, {16}, 4);
        const std::vector<ModelDef> clean{train_base_model(arch, train, seed * 5, {50, 0.05, 32}),
                                          train_base_model(arch, train, seed * 5 + 1, {1, 0.01, 32}),
                                          train_base_model(arch, train, seed * 5 + 2, {0, 0.05, 32})};
        const auto evil = corrupt_model(train_base_model(arch, train, seed * 5 + 3, {0, 0.05, 32}),
                                        {CorruptionMode::Extreme, 1e6}, seed);
        auto with = clean;
        const std::size_t evil_at = seed % 4;
        with.insert(with.begin() + static_cast<std::ptrdiff_t>(evil_at), evil);

        struct Run {
            std::size_t winner;
            double acc;
            bool finite;
        };
        auto run = [&](const std::vector<ModelDef>& defs) {
            const ModelZoo zoo(defs);
            TrainConfig cfg;
            cfg.lr = 0.005;
            cfg.lambda = 1.0;
            cfg.epochs = 150;
            cfg.seed = seed;
            cfg.spec = MergeSpec::full(Level::Model, defs.size());
            const auto result = ledger.train(zoo, train, val, cfg);
            bool finite = true;
            for (const auto& e : result.report.epochs)
                finite = finite && std::isfinite(e.train_loss) && std::isfinite(e.val_loss);
            return Run{extract_winner(result.bank, 0).model,
                       evaluate(MergedModel(zoo, cfg.spec, result.bank), val).accuracy, finite};
        };
        const auto without = run(clean);
        const auto polluted = run(with);
        const bool ok =
            polluted.finite && polluted.winner != evil_at && std::abs(polluted.acc - without.acc) <= 0.005;
        passes += ok;
        detail += fmt("[s%llu %s without=%.4f with=%.4f] ", static_cast<unsigned long long>(seed), ok ? "ok" : "x",
                      without.acc, polluted.acc);
    }
    return {passes == 10, fmt("%d/10 seeds ", passes) + detail};
}

Outcome soft_merging_contract() {
    return {ledger.runs > 0 && ledger.mismatches == 0,
            fmt("%zu training runs, %zu with changed zoo checksums", ledger.runs, ledger.mismatches)};
}

// Copies each dense layer from the model its site selects; used as an
// independent reference for mixed one-hot assignments.
ModelDef splice(const ModelZoo& zoo, const MergeSpec& spec, const std::vector<std::size_t>& pick) {
    ModelDef out = zoo.front();
    const auto ranges = resolve_sites(spec, out);
    for (std::size_t i = 0; i < ranges.size(); ++i)
        for (std::size_t l = ranges[i].first; l <= ranges[i].last; ++l) out.mutable_layer(l) = zoo[pick[i]].layer(l);
    return out;
}

Outcome selection_identity() {
    Rng rng(77);
    std::vector<ModelDef> defs;
    for (int j = 0; j < 3; ++j) {
        auto def = split_modules(mlp_architecture(6, {10, 8, 7}, 4), 2);
        initialize_weights(def, rng);
        for (std::size_t l = 0; l < def.layer_count(); ++l)
            if (def.layer(l).kind == LayerKind::Dense)
                for (auto& b : def.mutable_layer(l).bias.data()) b = rng.normal();
        defs.push_back(def);
    }
    const ModelZoo zoo(defs);
    const auto x = random_tensor({100, 6}, rng);
    std::size_t nonzero = 0, cases = 0;
    for (Level level : {Level::Model, Level::Module, Level::Layer}) {
        const auto spec = MergeSpec::full(level, 3);
        const auto sites = resolve_sites(spec, zoo.front()).size();
        for (std::size_t j = 0; j < 3; ++j) {
            const std::vector<std::size_t> pick(sites, j);
            const MergedModel m(zoo, spec, one_hot_bank(spec, zoo.front(), pick));
            nonzero += !(forward_merged(m, x) == forward(zoo[j], x));
            ++cases;
        }
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<std::size_t> pick(sites);
            for (auto& p : pick) p = rng.below(3);
            const MergedModel m(zoo, spec, one_hot_bank(spec, zoo.front(), pick));
            nonzero += !(forward_merged(m, x) == forward(splice(zoo, spec, pick), x));
            ++cases;
        }
    }
    return {nonzero == 0, fmt("%zu of %zu one-hot configurations differ on 100 inputs", nonzero, cases)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"distribution constants", distribution_constants},
        {"sampling consistency", sampling_consistency},
        {"gradient suite", gradient_suite},
        {"model-level selection on a quality staircase", model_level_staircase},
        {"module-level selection of the trained halves", module_level_halves},
        {"agreement with the brute-force oracle", oracle_equivalence},
        {"robustness to an extreme-corrupted model", robustness},
        {"zoo weights never change", soft_merging_contract},
        {"one-hot selection identity", selection_identity},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !out.pass;
        std::printf("%s criterion %zu (%s) [%.1fs]: %s\n", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, secs,
                    out.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
