#pragma once

// Mini-batch SGD over gate parameters with frozen base weights.

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "datazoo.hpp"
#include "mergenet.hpp"

namespace softmerge {

struct TrainConfig {
    double lr = 0.001;
    std::size_t epochs = 150;
    std::size_t batch_size = 32;
    double lambda = 5.0;  // fixed for the whole run
    std::uint64_t seed = 0;
    MergeSpec spec;
    GateMode mode = GateMode::Stochastic;
    double sigma_init = 0.01;  // std-dev of the initial log_alpha
    bool train_beta = false;
    ModelLevelLoss model_level_loss = ModelLevelLoss::Combined;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    std::vector<double> log_alpha;  // site-major snapshot after the epoch
};

struct RunReport {
    std::vector<double> initial_log_alpha;
    std::vector<EpochRecord> epochs;
    GateBank final_bank;
    double wall_seconds = 0.0;
};

struct TrainResult {
    GateBank bank;
    RunReport report;
};

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
};

namespace detail {

template <class Forward>
Evaluation evaluate_with(const Dataset& data, Forward&& forward) {
    if (data.size() == 0) throw DatasetError("evaluate: empty dataset");
    constexpr std::size_t kChunk = 512;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        idx.resize(std::min(kChunk, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        Tape tape;
        const auto labels = data.labels_at(idx);
        const Var logits = forward(tape, tape.constant(data.rows(idx)));
        loss_sum += softmax_cross_entropy(logits, labels).value()[0] * static_cast<double>(idx.size());
        const auto& lv = logits.value();
        const std::size_t c = lv.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::size_t arg = 0;
            for (std::size_t k = 1; k < c; ++k)
                if (lv.at(i, k) > lv.at(i, arg)) arg = k;
            if (arg == labels[i]) ++correct;
        }
    }
    const auto n = static_cast<double>(data.size());
    return {loss_sum / n, static_cast<double>(correct) / n};
}

}  // namespace detail

inline Evaluation evaluate(const ModelDef& model, const Dataset& data) {
    return detail::evaluate_with(data, [&](Tape&, const Var& x) { return forward(model, x); });
}

// Always deterministic gates, whatever mode the model is in.
inline Evaluation evaluate(const MergedModel& merged, const Dataset& data) {
    MergedModel m = merged;
    m.set_mode(GateMode::Deterministic);
    return detail::evaluate_with(data, [&](Tape& tape, const Var& x) {
        const auto gates = record_gates(tape, m, nullptr);
        return forward_merged(m, x, gates);
    });
}

inline TrainResult train_gates(const ModelZoo& zoo, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
    if (train.size() == 0 || val.size() == 0) throw DatasetError("train_gates: empty dataset");
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("train_gates: learning rate must be > 0");
    if (cfg.lambda < 0.0) throw std::invalid_argument("train_gates: lambda must be >= 0");
    if (cfg.batch_size == 0) throw std::invalid_argument("train_gates: batch size must be > 0");
    const auto t0 = std::chrono::steady_clock::now();

    MergedModel merged(zoo, cfg.spec, init_gates(cfg.spec, zoo.front(), cfg.seed, cfg.sigma_init), cfg.mode);
    merged.train_beta = cfg.train_beta;
    merged.model_level_loss = cfg.model_level_loss;

    TrainResult result;
    result.report.initial_log_alpha = merged.bank().log_alphas();

    Rng shuffle_rng(cfg.seed ^ 0x5eed'5a1f'0000'0001ull);
    Rng noise_rng(cfg.seed ^ 0x9a7e'0000'0002ull);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
            Tape tape;
            const auto labels = train.labels_at(idx);
            const auto loss = merged_loss(merged, tape, train.rows(idx), labels, cfg.lambda, &noise_rng);
            const double value = loss.total.value()[0];
            if (!std::isfinite(value)) {
                std::ostringstream os;
                os << "train_gates: non-finite loss " << value << " at epoch " << epoch << " batch " << batches;
                throw DivergenceError(os.str());
            }
            tape.backward(loss.total);
            const auto grad = gate_gradients(tape, loss.gates);
            auto& bank = merged.bank();
            for (std::size_t i = 0; i < bank.site_count(); ++i)
                for (std::size_t j = 0; j < bank.model_count(); ++j) {
                    auto& p = bank[i].gates[j];
                    if (!std::isfinite(grad.log_alpha[i][j]) || !std::isfinite(grad.raw_beta[i][j]))
                        throw DivergenceError("train_gates: non-finite gate gradient at epoch " + std::to_string(epoch));
                    p.log_alpha -= cfg.lr * grad.log_alpha[i][j];
                    if (cfg.train_beta) p.raw_beta -= cfg.lr * grad.raw_beta[i][j];
                }
            loss_sum += value;
            ++batches;
        }
        const auto ev = evaluate(merged, val);
        result.report.epochs.push_back(
            {epoch, loss_sum / static_cast<double>(batches), ev.loss, ev.accuracy, merged.bank().log_alphas()});
    }

    result.bank = merged.bank();
    result.report.final_bank = merged.bank();
    result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// Columns: epoch, train_loss, val_loss, val_acc, then log_alpha per gate as
// la_s<site>_m<model>.
inline std::string run_report_csv(const RunReport& report, const GateBank& layout) {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,val_acc";
    for (const auto& s : layout.sites())
        for (std::size_t j = 0; j < s.gates.size(); ++j) os << ",la_s" << s.site << "_m" << j;
    os << '\n';
    for (const auto& e : report.epochs) {
        os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss) << ','
           << format_double(e.val_acc);
        for (double la : e.log_alpha) os << ',' << format_double(la);
        os << '\n';
    }
    return os.str();
}

}  // namespace softmerge
