#pragma once

// Experiment plumbing behind the softmerge command-line tool: a key=value
// configuration, dataset/zoo construction and the zoo/merge/oracle/eval/report
// commands. Argument parsing itself lives in the tool.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "datazoo.hpp"
#include "mergenet.hpp"
#include "netgraph.hpp"
#include "oracle.hpp"
#include "trainer.hpp"

namespace softmerge::cli {

namespace fs = std::filesystem;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class MissingFile : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kMissingFile = 3,
    kBadFormat = 4,
    kCapExceeded = 5,
    kDiverged = 6,
    kArchitecture = 7,
};

struct CorruptionEntry {
    std::size_t model = 0;
    Corruption corruption;
};

struct ExperimentConfig {
    // dataset
    std::string dataset = "blobs";
    std::size_t classes = 4;
    std::size_t features = 8;
    double separation = 5.0;
    double noise = 0.1;
    std::size_t train_size = 800;
    std::size_t val_size = 400;
    std::uint64_t data_seed = 1;
    std::string idx_train_images, idx_train_labels, idx_val_images, idx_val_labels;
    // zoo
    std::size_t models = 3;
    std::vector<std::uint32_t> hidden{16};
    std::size_t modules = 1;
    std::vector<std::size_t> base_epochs{50};
    double base_lr = 0.05;
    std::size_t base_batch = 32;
    std::uint64_t zoo_seed = 0;
    std::vector<CorruptionEntry> corrupt;
    // merge
    Level level = Level::Model;
    std::vector<std::size_t> sites;  // empty: every candidate site
    std::size_t prime = 0;
    // gate training
    double lr = 0.001;
    std::size_t epochs = 150;
    std::size_t batch_size = 32;
    double lambda = 5.0;
    std::uint64_t seed = 0;
    GateMode mode = GateMode::Stochastic;
    double sigma_init = 0.01;
    bool train_beta = false;
    ModelLevelLoss model_level_loss = ModelLevelLoss::Combined;
    std::uint64_t cap = kDefaultAssignmentCap;
    // output
    std::string out = "run";
    std::size_t limit = 0;  // 0: no cap on samples

    MergeSpec merge_spec() const {
        return sites.empty() ? MergeSpec::full(level, models) : MergeSpec::select(level, models, sites, prime);
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.lr = lr;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.lambda = lambda;
        t.seed = seed;
        t.spec = merge_spec();
        t.mode = mode;
        t.sigma_init = sigma_init;
        t.train_beta = train_beta;
        t.model_level_loss = model_level_loss;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T x{};
    in >> x;
    if (!in || !in.eof()) throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    if constexpr (std::is_unsigned_v<T>)
        if (!v.empty() && v[0] == '-') throw ConfigError("config: key '" + key + "' must be non-negative");
    return x;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    if (v.empty()) return out;
    for (const auto& item : split(v, ',')) out.push_back(parse_number<T>(key, item));
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true|false, got '" + v + "'");
}

template <class T>
std::string join(const std::vector<T>& xs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    return os.str();
}

// "j:randomize" or "j:extreme" or "j:extreme:SCALE", comma-separated.
inline std::vector<CorruptionEntry> parse_corruptions(const std::string& v) {
    std::vector<CorruptionEntry> out;
    if (v.empty()) return out;
    for (const auto& item : split(v, ',')) {
        const auto parts = split(item, ':');
        if (parts.size() < 2 || parts.size() > 3)
            throw ConfigError("config: corrupt entry '" + item + "' must be MODEL:randomize or MODEL:extreme[:SCALE]");
        CorruptionEntry e;
        e.model = parse_number<std::size_t>("corrupt", parts[0]);
        if (parts[1] == "randomize" && parts.size() == 2) {
            e.corruption.mode = CorruptionMode::Randomize;
        } else if (parts[1] == "extreme") {
            e.corruption.mode = CorruptionMode::Extreme;
            if (parts.size() == 3) e.corruption.scale = parse_number<double>("corrupt", parts[2]);
        } else {
            throw ConfigError("config: corrupt entry '" + item + "' has unknown mode '" + parts[1] + "'");
        }
        out.push_back(e);
    }
    return out;
}

inline std::string format_corruptions(const std::vector<CorruptionEntry>& entries) {
    std::ostringstream os;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        os << (i ? "," : "") << e.model << ':';
        if (e.corruption.mode == CorruptionMode::Randomize) os << "randomize";
        else os << "extreme:" << format_double(e.corruption.scale);
    }
    return os.str();
}

}  // namespace detail

struct ConfigKey {
    std::string name;
    std::string help;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

// Every accepted key, in documentation order. Defaults are read back from a
// default-constructed ExperimentConfig.
inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    auto num = [](auto member, std::string name, std::string help) {
        return ConfigKey{name, help,
                         [member, name](ExperimentConfig& c, const std::string& v) {
                             using T = std::remove_reference_t<decltype(c.*member)>;
                             c.*member = parse_number<T>(name, v);
                         },
                         [member](const ExperimentConfig& c) {
                             std::ostringstream os;
                             using T = std::remove_reference_t<decltype(c.*member)>;
                             if constexpr (std::is_floating_point_v<T>) os << format_double(c.*member);
                             else os << c.*member;
                             return os.str();
                         }};
    };
    auto str = [](auto member, std::string name, std::string help) {
        return ConfigKey{name, help, [member](ExperimentConfig& c, const std::string& v) { c.*member = v; },
                         [member](const ExperimentConfig& c) { return c.*member; }};
    };
    static const std::vector<ConfigKey> keys = {
        {"dataset", "blobs | moons | idx",
         [](ExperimentConfig& c, const std::string& v) {
             if (v != "blobs" && v != "moons" && v != "idx")
                 throw ConfigError("config: dataset must be blobs|moons|idx, got '" + v + "'");
             c.dataset = v;
         },
         [](const ExperimentConfig& c) { return c.dataset; }},
        num(&ExperimentConfig::classes, "classes", "number of blob classes"),
        num(&ExperimentConfig::features, "features", "blob feature dimension"),
        num(&ExperimentConfig::separation, "separation", "blob center separation"),
        num(&ExperimentConfig::noise, "noise", "two-moons noise std-dev"),
        num(&ExperimentConfig::train_size, "train_size", "synthetic training samples"),
        num(&ExperimentConfig::val_size, "val_size", "synthetic validation samples"),
        num(&ExperimentConfig::data_seed, "data_seed", "seed of the synthetic data (validation uses data_seed+1)"),
        str(&ExperimentConfig::idx_train_images, "idx_train_images", "IDX image file for training (dataset=idx)"),
        str(&ExperimentConfig::idx_train_labels, "idx_train_labels", "IDX label file for training (dataset=idx)"),
        str(&ExperimentConfig::idx_val_images, "idx_val_images", "IDX image file for validation (dataset=idx)"),
        str(&ExperimentConfig::idx_val_labels, "idx_val_labels", "IDX label file for validation (dataset=idx)"),
        num(&ExperimentConfig::models, "models", "zoo size J"),
        {"hidden", "hidden layer widths, comma-separated",
         [](ExperimentConfig& c, const std::string& v) { c.hidden = parse_list<std::uint32_t>("hidden", v); },
         [](const ExperimentConfig& c) { return join(c.hidden); }},
        num(&ExperimentConfig::modules, "modules", "contiguous modules per model"),
        {"base_epochs", "training epochs per zoo model; one value or one per model",
         [](ExperimentConfig& c, const std::string& v) {
             c.base_epochs = parse_list<std::size_t>("base_epochs", v);
             if (c.base_epochs.empty()) throw ConfigError("config: base_epochs must not be empty");
         },
         [](const ExperimentConfig& c) { return join(c.base_epochs); }},
        num(&ExperimentConfig::base_lr, "base_lr", "learning rate of zoo model training"),
        num(&ExperimentConfig::base_batch, "base_batch", "batch size of zoo model training"),
        num(&ExperimentConfig::zoo_seed, "zoo_seed", "model j is trained with seed zoo_seed+j"),
        {"corrupt", "MODEL:randomize | MODEL:extreme[:SCALE], comma-separated",
         [](ExperimentConfig& c, const std::string& v) { c.corrupt = parse_corruptions(v); },
         [](const ExperimentConfig& c) { return format_corruptions(c.corrupt); }},
        {"level", "model | module | layer",
         [](ExperimentConfig& c, const std::string& v) {
             try {
                 c.level = parse_level(v);
             } catch (const MergeSpecError& e) {
                 throw ConfigError(std::string("config: ") + e.what());
             }
         },
         [](const ExperimentConfig& c) { return std::string(to_string(c.level)); }},
        {"sites", "selected site ids, comma-separated; empty selects every site",
         [](ExperimentConfig& c, const std::string& v) { c.sites = parse_list<std::size_t>("sites", v); },
         [](const ExperimentConfig& c) { return join(c.sites); }},
        num(&ExperimentConfig::prime, "prime", "model supplying every non-selected site"),
        num(&ExperimentConfig::lr, "lr", "gate learning rate"),
        num(&ExperimentConfig::epochs, "epochs", "gate training epochs"),
        num(&ExperimentConfig::batch_size, "batch_size", "gate training batch size"),
        num(&ExperimentConfig::lambda, "lambda", "gate penalty weight"),
        num(&ExperimentConfig::seed, "seed", "gate initialization, shuffling and noise seed"),
        {"mode", "stochastic | deterministic gates during training",
         [](ExperimentConfig& c, const std::string& v) {
             if (v == "stochastic") c.mode = GateMode::Stochastic;
             else if (v == "deterministic") c.mode = GateMode::Deterministic;
             else throw ConfigError("config: mode must be stochastic|deterministic, got '" + v + "'");
         },
         [](const ExperimentConfig& c) {
             return std::string(c.mode == GateMode::Stochastic ? "stochastic" : "deterministic");
         }},
        num(&ExperimentConfig::sigma_init, "sigma_init", "std-dev of the initial log alpha"),
        {"train_beta", "also learn beta (true | false)",
         [](ExperimentConfig& c, const std::string& v) { c.train_beta = parse_bool("train_beta", v); },
         [](const ExperimentConfig& c) { return std::string(c.train_beta ? "true" : "false"); }},
        {"model_level_loss", "combined | per_model_sum",
         [](ExperimentConfig& c, const std::string& v) {
             if (v == "combined") c.model_level_loss = ModelLevelLoss::Combined;
             else if (v == "per_model_sum") c.model_level_loss = ModelLevelLoss::PerModelSum;
             else throw ConfigError("config: model_level_loss must be combined|per_model_sum, got '" + v + "'");
         },
         [](const ExperimentConfig& c) {
             return std::string(c.model_level_loss == ModelLevelLoss::Combined ? "combined" : "per_model_sum");
         }},
        num(&ExperimentConfig::cap, "cap", "maximum assignments the oracle may enumerate"),
        str(&ExperimentConfig::out, "out", "output directory"),
        num(&ExperimentConfig::limit, "limit", "cap on training and validation samples; 0 = none"),
    };
    return keys;
}

inline void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : config_keys())
        if (k.name == key) return k.set(cfg, value);
    throw ConfigError("config: unknown key '" + key + "'");
}

// key = value lines; '#' starts a comment. Unknown and repeated keys are errors.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig cfg = {}) {
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            throw ConfigError("config line " + std::to_string(lineno) + ": key '" + key + "' repeated");
        seen.push_back(key);
        try {
            set_key(cfg, key, detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open config '" + path.string() + "'");
    return parse_config(in);
}

// Every key with its current value, one "key = value" line each; parses back
// to the same configuration.
inline std::string format_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// datasets and zoo

struct DataPair {
    Dataset train;
    Dataset val;
};

inline Dataset truncate(const Dataset& d, std::size_t limit) {
    if (limit == 0 || limit >= d.size()) return d;
    std::vector<std::size_t> idx(limit);
    for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
    Dataset out{d.rows(idx), d.labels_at(idx), d.classes, d.split};
    return out;
}

inline DataPair build_data(const ExperimentConfig& cfg) {
    DataPair p;
    if (cfg.dataset == "blobs") {
        p.train = gen_blobs(cfg.classes, cfg.features, cfg.train_size, cfg.separation, cfg.data_seed);
        p.val = gen_blobs(cfg.classes, cfg.features, cfg.val_size, cfg.separation, cfg.data_seed + 1);
    } else if (cfg.dataset == "moons") {
        p.train = gen_two_moons(cfg.train_size, cfg.noise, cfg.data_seed);
        p.val = gen_two_moons(cfg.val_size, cfg.noise, cfg.data_seed + 1);
    } else {
        for (const auto* f : {&cfg.idx_train_images, &cfg.idx_train_labels, &cfg.idx_val_images, &cfg.idx_val_labels})
            if (f->empty()) throw ConfigError("config: dataset=idx needs all four idx_* paths");
        for (const auto* f : {&cfg.idx_train_images, &cfg.idx_train_labels, &cfg.idx_val_images, &cfg.idx_val_labels})
            if (!fs::exists(*f)) throw MissingFile("missing IDX file '" + *f + "'");
        p.train = load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.limit);
        p.val = load_idx(cfg.idx_val_images, cfg.idx_val_labels, cfg.limit);
        p.val.classes = p.train.classes = std::max(p.train.classes, p.val.classes);
    }
    p.train = truncate(p.train.with_split(Split::Train), cfg.limit);
    p.val = truncate(p.val.with_split(Split::Val), cfg.limit);
    return p;
}

inline ModelDef zoo_architecture(const ExperimentConfig& cfg, const DataPair& data) {
    const auto inputs = static_cast<std::uint32_t>(data.train.row_size());
    const auto outputs = static_cast<std::uint32_t>(data.train.classes);
    auto arch = mlp_architecture(inputs, cfg.hidden, outputs);
    return cfg.modules > 1 ? split_modules(arch, cfg.modules) : arch;
}

inline std::vector<ModelDef> build_zoo(const ExperimentConfig& cfg, const DataPair& data) {
    if (cfg.models == 0) throw ConfigError("config: models must be >= 1");
    if (cfg.base_epochs.size() != 1 && cfg.base_epochs.size() != cfg.models)
        throw ConfigError("config: base_epochs needs 1 or " + std::to_string(cfg.models) + " values");
    for (const auto& c : cfg.corrupt)
        if (c.model >= cfg.models) throw ConfigError("config: corrupt names model " + std::to_string(c.model));
    const auto arch = zoo_architecture(cfg, data);
    std::vector<ModelDef> zoo;
    for (std::size_t j = 0; j < cfg.models; ++j) {
        const std::size_t epochs = cfg.base_epochs.size() == 1 ? cfg.base_epochs[0] : cfg.base_epochs[j];
        auto model = train_base_model(arch, data.train, cfg.zoo_seed + j, {epochs, cfg.base_lr, cfg.base_batch});
        for (const auto& c : cfg.corrupt)
            if (c.model == j) model = corrupt_model(model, c.corruption, cfg.zoo_seed + 1000 + j);
        zoo.push_back(std::move(model));
    }
    return zoo;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string model_file(std::size_t j) { return "model_" + std::to_string(j) + ".smrg"; }

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out << text;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw MissingFile("missing file '" + p.string() + "'");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(detail::split(line, ','));
    return rows;
}

// Loads the zoo listed in <out>/manifest.csv and checks every file against
// its recorded checksum.
inline std::vector<ModelDef> load_zoo(const fs::path& dir) {
    const auto rows = read_csv(dir / "manifest.csv");
    if (rows.empty() || rows[0].size() < 4 || rows[0][1] != "file")
        throw FormatError(FormatErrorKind::Invalid, "manifest.csv: unexpected header");
    std::vector<ModelDef> zoo;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto path = dir / rows[r].at(1);
        if (!fs::exists(path)) throw MissingFile("missing model file '" + path.string() + "'");
        auto model = load_model(path);
        if (hex64(weight_checksum(model)) != rows[r].at(3))
            throw FormatError(FormatErrorKind::Invalid, "checksum mismatch for '" + path.string() + "'");
        zoo.push_back(std::move(model));
    }
    return zoo;
}

// Initial log alpha of every gate in the layout of gates.csv.
inline std::string initial_gates_csv(const GateBank& layout, const std::vector<double>& log_alpha) {
    std::ostringstream os;
    os << "site,model,log_alpha\n";
    std::size_t k = 0;
    for (const auto& s : layout.sites())
        for (std::size_t j = 0; j < s.gates.size(); ++j)
            os << s.site << ',' << j << ',' << format_double(log_alpha.at(k++)) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// commands; human-readable progress goes to `log`, files to cfg.out

inline int cmd_zoo(const ExperimentConfig& cfg, std::ostream& log) {
    const auto data = build_data(cfg);
    const auto zoo = build_zoo(cfg, data);
    const fs::path dir(cfg.out);
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << "model,file,fingerprint,checksum,val_loss,val_acc\n";
    for (std::size_t j = 0; j < zoo.size(); ++j) {
        save_model(zoo[j], dir / model_file(j));
        const auto ev = evaluate(zoo[j], data.val);
        manifest << j << ',' << model_file(j) << ',' << hex64(zoo[j].fingerprint()) << ','
                 << hex64(weight_checksum(zoo[j])) << ',' << format_double(ev.loss) << ','
                 << format_double(ev.accuracy) << '\n';
        log << "model " << j << " val_acc=" << format_double(ev.accuracy) << '\n';
    }
    write_text(dir / "manifest.csv", manifest.str());
    return kOk;
}

inline int cmd_merge(const ExperimentConfig& cfg, std::ostream& log) {
    const fs::path dir(cfg.out);
    const ModelZoo zoo(load_zoo(dir));
    if (zoo.size() != cfg.models)
        throw ConfigError("config: models=" + std::to_string(cfg.models) + " but the manifest lists " +
                          std::to_string(zoo.size()));
    const auto data = build_data(cfg);
    const auto before = zoo.checksums();
    const auto tcfg = cfg.train_config();
    const auto result = train_gates(zoo, data.train, data.val, tcfg);
    if (zoo.checksums() != before) throw std::logic_error("merge: zoo weights changed during training");

    const MergedModel merged(zoo, tcfg.spec, result.bank);
    const auto final_model = finalize(merged);
    save_model(final_model, dir / "merged.smrg");
    write_text(dir / "gates.csv", gate_bank_csv(result.bank));
    write_text(dir / "gates_init.csv", initial_gates_csv(result.bank, result.report.initial_log_alpha));
    write_text(dir / "run.csv", run_report_csv(result.report, result.bank));

    std::ostringstream summary;
    summary << "name,val_loss,val_acc\n";
    for (std::size_t j = 0; j < zoo.size(); ++j) {
        const auto ev = evaluate(zoo[j], data.val);
        summary << "model_" << j << ',' << format_double(ev.loss) << ',' << format_double(ev.accuracy) << '\n';
    }
    const auto soft = evaluate(merged, data.val);
    const auto hard = evaluate(final_model, data.val);
    summary << "merged," << format_double(soft.loss) << ',' << format_double(soft.accuracy) << '\n';
    summary << "finalized," << format_double(hard.loss) << ',' << format_double(hard.accuracy) << '\n';
    write_text(dir / "summary.csv", summary.str());

    std::ostringstream winners;
    for (std::size_t i = 0; i < result.bank.site_count(); ++i)
        winners << (i ? "-" : "") << extract_winner(result.bank, i).model;
    log << "winners=" << winners.str() << " merged_acc=" << format_double(soft.accuracy)
        << " finalized_acc=" << format_double(hard.accuracy) << " wall_seconds=" << result.report.wall_seconds
        << '\n';
    return kOk;
}

inline int cmd_oracle(const ExperimentConfig& cfg, std::ostream& log) {
    const fs::path dir(cfg.out);
    const ModelZoo zoo(load_zoo(dir));
    const auto data = build_data(cfg);
    const auto result = brute_force_best(zoo, cfg.merge_spec(), data.val, cfg.cap);
    write_text(dir / "oracle.csv", oracle_csv(result));
    log << "best=" << format_assignment(result.best) << " loss=" << format_double(result.loss)
        << " tie=" << (result.tie ? "true" : "false") << '\n';
    return kOk;
}

// Prints exactly one line: loss=<v> accuracy=<v> samples=<n>.
inline int cmd_eval(const ExperimentConfig& cfg, const fs::path& model_path, std::ostream& out) {
    if (!fs::exists(model_path)) throw MissingFile("missing model file '" + model_path.string() + "'");
    const auto model = load_model(model_path);
    const auto data = build_data(cfg);
    const auto ev = evaluate(model, data.val);
    out << "loss=" << format_double(ev.loss) << " accuracy=" << format_double(ev.accuracy)
        << " samples=" << data.val.size() << '\n';
    return kOk;
}

struct ReportRow {
    std::string name;
    double val_acc = 0.0;
    std::vector<double> init_log_alpha;
    std::vector<double> final_log_alpha;
};

// Accuracy per model and for the merged and finalized models, plus the
// initial and final log alpha of every gate of each model.
inline std::vector<ReportRow> build_report(const fs::path& dir) {
    const auto summary = read_csv(dir / "summary.csv");
    const auto final_gates = read_csv(dir / "gates.csv");
    const auto init_gates = read_csv(dir / "gates_init.csv");
    if (final_gates.size() != init_gates.size())
        throw FormatError(FormatErrorKind::Invalid, "gates.csv and gates_init.csv disagree");
    std::vector<ReportRow> rows;
    for (std::size_t r = 1; r < summary.size(); ++r) {
        ReportRow row{summary[r].at(0), std::stod(summary[r].at(2)), {}, {}};
        if (row.name.rfind("model_", 0) == 0) {
            const auto j = row.name.substr(6);
            for (std::size_t g = 1; g < final_gates.size(); ++g) {
                if (final_gates[g].at(1) != j) continue;
                row.init_log_alpha.push_back(std::stod(init_gates[g].at(2)));
                row.final_log_alpha.push_back(std::stod(final_gates[g].at(2)));
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string render_svg(const std::vector<ReportRow>& rows) {
    const int bar = 40, gap = 20, height = 200, left = 40;
    const int width = left + static_cast<int>(rows.size()) * (bar + gap) + gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + 60 << "\">\n";
    os << "<line x1=\"" << left << "\" y1=\"" << height + 10 << "\" x2=\"" << width << "\" y2=\"" << height + 10
       << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int h = static_cast<int>(rows[i].val_acc * height + 0.5);
        const int x = left + gap + static_cast<int>(i) * (bar + gap);
        const bool model = rows[i].name.rfind("model_", 0) == 0;
        os << "<rect x=\"" << x << "\" y=\"" << height + 10 - h << "\" width=\"" << bar << "\" height=\"" << h
           << "\" fill=\"" << (model ? "#7f7f7f" : "#1f77b4") << "\"/>\n";
        os << "<text x=\"" << x + bar / 2 << "\" y=\"" << height + 28 << "\" font-size=\"10\" text-anchor=\"middle\">"
           << rows[i].name << "</text>\n";
        char acc[16];
        std::snprintf(acc, sizeof acc, "%.3f", rows[i].val_acc);
        os << "<text x=\"" << x + bar / 2 << "\" y=\"" << height + 5 - h
           << "\" font-size=\"10\" text-anchor=\"middle\">" << acc << "</text>\n";
    }
    os << "<text x=\"4\" y=\"14\" font-size=\"12\">validation accuracy</text>\n</svg>\n";
    return os.str();
}

inline int cmd_report(const fs::path& dir, bool plot, std::ostream& out) {
    const auto rows = build_report(dir);
    out << std::left << std::setw(12) << "name" << std::setw(10) << "val_acc"
        << "log_alpha (initial -> final, per site)\n";
    for (const auto& r : rows) {
        char acc[16];
        std::snprintf(acc, sizeof acc, "%.4f", r.val_acc);
        out << std::setw(12) << r.name << std::setw(10) << acc;
        for (std::size_t s = 0; s < r.init_log_alpha.size(); ++s) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%s%.4f -> %.4f", s ? "  " : "", r.init_log_alpha[s],
                          r.final_log_alpha[s]);
            out << buf;
        }
        out << '\n';
    }
    if (plot) write_text(dir / "report.svg", render_svg(rows));
    return kOk;
}

// ---------------------------------------------------------------------------
// error reporting

struct ErrorInfo {
    int code = kFailure;
    std::string kind;
    std::string message;
};

inline std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

// Maps the active exception to an exit code; call from inside a catch block.
inline ErrorInfo classify_current_exception() {
    try {
        throw;
    } catch (const ConfigError& e) {
        return {kUsage, "config", one_line(e.what())};
    } catch (const MergeSpecError& e) {
        return {kUsage, "config", one_line(e.what())};
    } catch (const MissingFile& e) {
        return {kMissingFile, "missing_file", one_line(e.what())};
    } catch (const IoError& e) {
        return {kMissingFile, "io", one_line(e.what())};
    } catch (const FormatError& e) {
        return {kBadFormat, "format", one_line(e.what())};
    } catch (const DatasetError& e) {
        return {kBadFormat, "dataset", one_line(e.what())};
    } catch (const CapExceeded& e) {
        return {kCapExceeded, "cap_exceeded", one_line(e.what())};
    } catch (const DivergenceError& e) {
        return {kDiverged, "diverged", one_line(e.what())};
    } catch (const ArchitectureError& e) {
        return {kArchitecture, "architecture", one_line(e.what())};
    } catch (const std::exception& e) {
        return {kFailure, "internal", one_line(e.what())};
    }
}

inline std::string format_error(const ErrorInfo& e) {
    return "error code=" + std::to_string(e.code) + " kind=" + e.kind + " message=\"" + e.message + "\"";
}

}  // namespace softmerge::cli
