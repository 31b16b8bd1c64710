#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "softmerge/cli.hpp"

using namespace softmerge;
using namespace softmerge::cli;

int main(int argc, char** argv) {
    CLI::App app{"softmerge: learn hard-concrete gates that merge a zoo of frozen models"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> limit;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key = value experiment file");
    app.add_option("--seed", seed, "overrides the gate training seed");
    app.add_option("--out", out, "overrides the output directory");
    app.add_option("--limit", limit, "caps training and validation samples");
    app.add_option("--set", overrides, "extra key=value overrides, applied after the config file");

    auto* zoo = app.add_subcommand("zoo", "train the model zoo and write model_<j>.smrg plus manifest.csv");
    auto* merge = app.add_subcommand("merge", "learn gates over the zoo and write the merged model");
    auto* oracle = app.add_subcommand("oracle", "score every one-hot assignment on the validation split");
    auto* eval = app.add_subcommand("eval", "print validation loss and accuracy of an SMRG file");
    std::string model_path;
    eval->add_option("--model", model_path, "SMRG file to evaluate")->required();
    auto* report = app.add_subcommand("report", "print accuracies and gate trajectories of a merge run");
    bool plot = false;
    report->add_flag("--plot", plot, "also write report.svg");
    auto* defaults = app.add_subcommand("defaults", "print every configuration key with its default");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (defaults->parsed()) {
            for (const auto& k : config_keys())
                std::cout << "# " << k.help << '\n' << k.name << " = " << k.get(ExperimentConfig{}) << '\n';
            return kOk;
        }
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            set_key(cfg, cli::detail::trim(kv.substr(0, eq)), cli::detail::trim(kv.substr(eq + 1)));
        }
        if (seed) cfg.seed = *seed;
        if (out) cfg.out = *out;
        if (limit) cfg.limit = *limit;

        if (zoo->parsed()) return cmd_zoo(cfg, std::cout);
        if (merge->parsed()) return cmd_merge(cfg, std::cout);
        if (oracle->parsed()) return cmd_oracle(cfg, std::cout);
        if (eval->parsed()) return cmd_eval(cfg, model_path, std::cout);
        if (report->parsed()) return cmd_report(cfg.out, plot, std::cout);
    } catch (...) {
        const auto info = classify_current_exception();
        std::cerr << format_error(info) << std::endl;
        return info.code;
    }
    return kUsage;
}
