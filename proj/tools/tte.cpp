#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tte/comparators.hpp"
#include "tte/estimators.hpp"
#include "tte/panel.hpp"
#include "tte/random.hpp"
#include "tte/simgen.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tte::Error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw tte::Error("cannot write file: " + path);
    out << text;
}

tte::Link parse_link(const std::string& name) {
    if (name == "identity") return tte::Link::identity;
    if (name == "logit") return tte::Link::logit;
    if (name == "probit") return tte::Link::probit;
    throw tte::Error("unknown link '" + name + "'");
}

tte::FormulaConfig parse_formula_config(const std::string& text) {
    tte::FormulaConfig config;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw tte::Error(std::string("invalid formula config: ") + e.what());
    }
    try {
        if (j.contains("propensity")) {
            const auto& p = j["propensity"];
            if (p.contains("covariates"))
                config.propensity_covariates = p["covariates"].get<std::vector<std::string>>();
            if (p.contains("include_lag")) config.propensity_includes_lag = p["include_lag"];
            if (p.contains("link")) config.propensity_link = parse_link(p["link"]);
        }
        if (j.contains("outcome")) {
            const auto& o = j["outcome"];
            if (o.contains("covariates"))
                config.outcome_covariates = o["covariates"].get<std::vector<std::string>>();
            if (o.contains("include_lag")) config.outcome_includes_lag = o["include_lag"];
            if (o.contains("link")) config.outcome_link = parse_link(o["link"]);
        }
    } catch (const tte::Error&) {
        throw;
    } catch (const std::exception& e) {
        throw tte::Error(std::string("invalid formula config: ") + e.what());
    }
    return config;
}

struct SimulateArgs {
    std::string config_path;
    long n = 1000;
    std::uint64_t seed = 12345;
    std::string out;
    std::string cf_out;
};

int cmd_simulate(const SimulateArgs& args) {
    tte::DgpSpec dgp;
    try {
        dgp = tte::dgp_from_json(read_file(args.config_path));
        if (!args.cf_out.empty()) dgp.emit_counterfactuals = true;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        const auto data = tte::generate(dgp, args.n, args.seed);
        std::ostringstream csv;
        tte::emit_long_csv(data.panel, csv);
        write_file(args.out, csv.str());
        if (!args.cf_out.empty()) {
            std::ostringstream cf;
            tte::write_counterfactual_csv(data, cf);
            write_file(args.cf_out, cf.str());
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

struct ReplicateArgs {
    std::string config_path;
    long reps = 1000;
    long n = 1000;
    std::uint64_t seed = 12345;
    std::string out;
    long oracle_n = 1000000;
    int threads = 0;
};

int cmd_replicate(const ReplicateArgs& args) {
    tte::DgpSpec dgp;
    try {
        if (args.reps < 1) throw tte::Error("--reps must be >= 1");
        if (args.n < 1) throw tte::Error("--n must be >= 1");
        dgp = tte::dgp_from_json(read_file(args.config_path));
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        const bool binary = dgp.outcome_family != tte::SimOutcomeFamily::continuous;
        const bool visit = dgp.design == tte::Design::visit_time;
        std::vector<tte::Estimand> estimands =
            visit ? std::vector<tte::Estimand>{tte::Estimand::psi_b}
                  : std::vector<tte::Estimand>{tte::Estimand::psi_u, tte::Estimand::psi_e};
        std::vector<tte::Link> links{tte::Link::logit};
        if (dgp.outcome_family == tte::SimOutcomeFamily::binary_probit_frailty)
            links.push_back(tte::Link::probit);

        const std::uint64_t oracle_seed = tte::derive_seed(args.seed, 0x0eac1eull);
        std::map<std::string, double> targets;
        std::map<tte::Estimand, double> estimand_limits;
        for (const auto estimand : estimands)
            estimand_limits[estimand] =
                tte::estimand_limit_oracle(dgp, estimand, args.oracle_n, oracle_seed).limit;

        std::vector<tte::EstimatorId> ids;
        for (const auto estimand : estimands) {
            for (const auto method : {tte::Method::ipw, tte::Method::gcomp}) {
                for (const auto link : links) {
                    tte::EstimatorId id;
                    id.kind = tte::EstimatorId::Kind::proposed;
                    id.estimand = estimand;
                    id.method = method;
                    id.nuisance_link = link;
                    id.label = tte::default_label(id);
                    targets[id.label] = estimand_limits[estimand];
                    ids.push_back(id);
                }
            }
        }
        if (!binary) {
            // pooled OLS tracked against the estimand limits, one row each
            for (const auto estimand : estimands) {
                tte::EstimatorId id;
                id.kind = tte::EstimatorId::Kind::pooled_ols;
                id.label = "pooled_ols_vs_" + tte::to_string(estimand);
                targets[id.label] = estimand_limits[estimand];
                ids.push_back(id);
            }
        }

        const auto table =
            tte::replicate_study(dgp, ids, args.reps, args.n, args.seed, targets, args.threads);
        std::ostringstream csv;
        tte::write_mc_csv(table, csv);
        write_file(args.out, csv.str());
        if (table.failures > 0)
            std::cerr << "note: " << table.failures << " replications failed and were excluded\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

struct AnalyzeArgs {
    std::string data_path;
    std::string formula_path;
    std::string design = "visit";
    std::string estimand = "all";
    std::string method = "all";
    std::string scale = "rd";
    std::string truncate = "95";
    std::string out_prefix;
    double level = 0.95;
};

int cmd_analyze(const AnalyzeArgs& args) {
    tte::CsvSchema schema;
    tte::FormulaConfig config;
    std::optional<double> truncation;
    std::vector<tte::Estimand> estimands;
    std::vector<tte::Method> methods;
    tte::Scale scale = tte::Scale::risk_difference;
    try {
        if (args.design == "visit")
            schema.design = tte::Design::visit_time;
        else if (args.design == "calendar")
            schema.design = tte::Design::calendar_time;
        else
            throw tte::Error("--design must be visit or calendar");
        if (!args.formula_path.empty()) config = parse_formula_config(read_file(args.formula_path));
        if (args.truncate != "none") {
            const double pct = std::stod(args.truncate);
            if (!(pct > 0.0 && pct <= 100.0)) throw tte::Error("--truncate must be in (0,100] or none");
            truncation = pct;
        }
        if (args.estimand == "all") {
            estimands = {tte::Estimand::psi_u, tte::Estimand::psi_e};
            if (schema.design == tte::Design::visit_time) estimands.push_back(tte::Estimand::psi_b);
        } else if (args.estimand == "psi_u") {
            estimands = {tte::Estimand::psi_u};
        } else if (args.estimand == "psi_e") {
            estimands = {tte::Estimand::psi_e};
        } else if (args.estimand == "psi_b") {
            estimands = {tte::Estimand::psi_b};
        } else {
            throw tte::Error("--estimand must be psi_u, psi_e, psi_b or all");
        }
        if (args.method == "all")
            methods = {tte::Method::ipw, tte::Method::gcomp};
        else if (args.method == "ipw")
            methods = {tte::Method::ipw};
        else if (args.method == "gcomp")
            methods = {tte::Method::gcomp};
        else
            throw tte::Error("--method must be ipw, gcomp or all");
        if (args.scale == "rd")
            scale = tte::Scale::risk_difference;
        else if (args.scale == "logodds")
            scale = tte::Scale::log_odds;
        else
            throw tte::Error("--scale must be rd or logodds");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        std::ifstream in(args.data_path);
        if (!in) throw tte::Error("cannot open data file: " + args.data_path);
        const tte::PanelDataset ds = tte::ingest_long_csv(in, schema);

        // estimand preconditions first, so violations are named before any
        // model fitting can fail for secondary reasons
        for (const auto estimand : estimands) tte::validate_positivity(ds, estimand);

        // union of nuisance pieces over the requested combinations
        tte::NuisanceNeeds needs;
        for (const auto estimand : estimands) {
            for (const auto method : methods) {
                const auto n = tte::needs_for(estimand, method);
                needs.propensity |= n.propensity;
                needs.outcome |= n.outcome;
                needs.participation |= n.participation;
                needs.baseline_regression |= n.baseline_regression;
            }
        }
        const tte::NuisanceSet nuis = tte::fit_nuisances(ds, config, needs);

        std::vector<tte::EstimateReport> reports;
        for (const auto estimand : estimands) {
            for (const auto method : methods) {
                tte::EstimateOptions options;
                options.truncation_percentile = truncation;
                options.level = args.level;
                reports.push_back(scale == tte::Scale::log_odds
                                      ? tte::estimate_odds_scale(ds, nuis, estimand, method, options)
                                      : tte::estimate(ds, nuis, estimand, method, options));
            }
        }
        std::ostringstream est_csv;
        tte::write_reports_csv(reports, est_csv);
        write_file(args.out_prefix + "_estimates.csv", est_csv.str());

        if (needs.propensity) {
            const auto values = tte::plugin::from_models(ds, nuis, tte::NuisanceNeeds{true});
            const auto cells = tte::positivity_diagnostics(ds, values.propensity);
            std::ostringstream pos_csv;
            tte::write_positivity_csv(cells, pos_csv);
            write_file(args.out_prefix + "_positivity.csv", pos_csv.str());
        }

        // nuisance coefficient dump
        nlohmann::json models = nlohmann::json::object();
        auto dump_model = [](const tte::FittedModel& model) {
            nlohmann::json m;
            m["link"] = model.spec.link == tte::Link::identity
                            ? "identity"
                            : (model.spec.link == tte::Link::logit ? "logit" : "probit");
            std::vector<std::string> names;
            if (model.intercept) names.push_back("(intercept)");
            for (const auto& term : model.used_terms) names.push_back(term.name);
            m["terms"] = names;
            m["coefficients"] = std::vector<double>(
                model.coefficients.data(), model.coefficients.data() + model.coefficients.size());
            m["n_used"] = model.n_used;
            m["iterations"] = model.iterations;
            return m;
        };
        for (int t = 1; t <= ds.tau; ++t) {
            const std::string key = "t" + std::to_string(t);
            if (needs.propensity && nuis.propensity[t - 1])
                models["propensity"][key] = dump_model(*nuis.propensity[t - 1]);
            if (needs.outcome && nuis.outcome[t - 1])
                models["outcome"][key] = dump_model(*nuis.outcome[t - 1]);
            if (needs.participation && nuis.participation[t - 1])
                models["participation"][key] = dump_model(*nuis.participation[t - 1]);
        }
        if (nuis.participation_reuses_propensity)
            models["participation"] = "reuses the t=1 propensity fit";
        write_file(args.out_prefix + "_models.json", models.dump(2));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

struct DemoArgs {
    long reps = 100;
    long n = 10000;
    std::uint64_t seed = 12345;
    std::string out;
    int threads = 0;
};

int cmd_demo(const DemoArgs& args) {
    try {
        if (args.reps < 1) throw tte::Error("--reps must be >= 1");
        if (args.n < 1) throw tte::Error("--n must be >= 1");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        const auto binary = tte::noncollapsibility_curves(args.reps, args.n, args.seed,
                                                          tte::OutcomeFamily::binary, args.threads);
        const auto continuous = tte::noncollapsibility_curves(
            args.reps, args.n, args.seed, tte::OutcomeFamily::continuous, args.threads);
        std::ostringstream csv;
        csv << "family,t,mean_estimate,sd_estimate,oracle\n";
        for (int t = 1; t <= 5; ++t)
            csv << "binary," << t << ',' << binary.mean_estimate[t - 1] << ','
                << binary.sd_estimate[t - 1] << ',' << binary.oracle[t - 1] << '\n';
        for (int t = 1; t <= 5; ++t)
            csv << "continuous," << t << ',' << continuous.mean_estimate[t - 1] << ','
                << continuous.sd_estimate[t - 1] << ',' << continuous.oracle[t - 1] << '\n';
        write_file(args.out, csv.str());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

struct LimitsArgs {
    std::string config_path;
    std::string estimator = "psi_u";
    long mc_n = 1000000;
    std::uint64_t seed = 12345;
    std::string out;
    bool ols_include_time = true;
    bool ols_include_lag = false;
};

int cmd_limits(const LimitsArgs& args) {
    tte::DgpSpec dgp;
    try {
        dgp = tte::dgp_from_json(read_file(args.config_path));
        if (args.estimator != "ols" && args.estimator != "g" && args.estimator != "psi_u" &&
            args.estimator != "psi_e" && args.estimator != "psi_b")
            throw tte::Error("--estimator must be one of ols, g, psi_u, psi_e, psi_b");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        tte::LimitReport report;
        if (args.estimator == "ols") {
            tte::OlsLimitTerms terms;
            terms.include_time = args.ols_include_time;
            terms.include_lag = args.ols_include_lag;
            report = tte::ols_population_limit(dgp, args.mc_n, args.seed, terms);
        } else if (args.estimator == "g") {
            report = tte::g_population_limit(dgp, args.mc_n, args.seed);
        } else {
            tte::Estimand estimand = tte::Estimand::psi_u;
            if (args.estimator == "psi_e") estimand = tte::Estimand::psi_e;
            if (args.estimator == "psi_b") estimand = tte::Estimand::psi_b;
            const auto limit = tte::estimand_limit_oracle(dgp, estimand, args.mc_n, args.seed);
            report.estimator = args.estimator;
            report.limit = limit.limit;
            report.mc_se = limit.mc_se;
            report.mc_n = limit.mc_n;
            report.seed = limit.seed;
        }
        const std::string text = tte::limit_json(report);
        if (args.out.empty())
            std::cout << text << "\n";
        else
            write_file(args.out, text + "\n");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Model-free target trial estimands: simulation, replication and analysis"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Generate a long-format dataset from a DGP config");
    simulate->add_option("--config", sim.config_path, "DGP config (JSON)")->required();
    simulate->add_option("--n", sim.n, "number of patients (visit) or slots (calendar)");
    simulate->add_option("--seed", sim.seed, "RNG seed");
    simulate->add_option("--out", sim.out, "output CSV path")->required();
    simulate->add_option("--cf-out", sim.cf_out, "also write the counterfactual table CSV");

    ReplicateArgs rep;
    auto* replicate = app.add_subcommand("replicate", "Run a replication study and write the summary table");
    replicate->add_option("--config", rep.config_path, "DGP config (JSON)")->required();
    replicate->add_option("--reps", rep.reps, "number of replications");
    replicate->add_option("--n", rep.n, "sample size per replication");
    replicate->add_option("--seed", rep.seed, "master seed");
    replicate->add_option("--out", rep.out, "output CSV path")->required();
    replicate->add_option("--oracle-n", rep.oracle_n, "draw size for the limit oracle targets");
    replicate->add_option("--threads", rep.threads, "worker threads (0 = all cores)");

    AnalyzeArgs ana;
    auto* analyze = app.add_subcommand("analyze", "Estimate the target trial effects on a long-format CSV");
    analyze->add_option("--data", ana.data_path, "long-format CSV")->required();
    analyze->add_option("--config", ana.formula_path, "working-model formula config (JSON)");
    analyze->add_option("--design", ana.design, "visit or calendar");
    analyze->add_option("--estimand", ana.estimand, "psi_u, psi_e, psi_b or all");
    analyze->add_option("--method", ana.method, "ipw, gcomp or all");
    analyze->add_option("--scale", ana.scale, "rd or logodds");
    analyze->add_option("--truncate", ana.truncate, "weight truncation percentile or none");
    analyze->add_option("--level", ana.level, "confidence level");
    analyze->add_option("--out", ana.out_prefix, "output prefix")->required();

    DemoArgs demo;
    auto* demo_cmd = app.add_subcommand("demo-noncollapsibility",
                                        "Per-visit marginal estimates under the shrinking-variance process");
    demo_cmd->add_option("--reps", demo.reps, "number of replications");
    demo_cmd->add_option("--n", demo.n, "sample size per replication");
    demo_cmd->add_option("--seed", demo.seed, "master seed");
    demo_cmd->add_option("--threads", demo.threads, "worker threads (0 = all cores)");
    demo_cmd->add_option("--out", demo.out, "output CSV path")->required();

    LimitsArgs lim;
    auto* limits = app.add_subcommand("limits", "Population limits by Monte Carlo");
    limits->add_option("--config", lim.config_path, "DGP config (JSON)")->required();
    limits->add_option("--estimator", lim.estimator, "ols, g, psi_u, psi_e or psi_b");
    limits->add_option("--mc-n", lim.mc_n, "Monte Carlo draw size");
    limits->add_option("--seed", lim.seed, "RNG seed");
    limits->add_option("--out", lim.out, "output JSON path (stdout when omitted)");
    limits->add_flag("--ols-include-time,!--no-ols-include-time", lim.ols_include_time,
                     "include the visit index in the OLS projection");
    limits->add_flag("--ols-include-lag", lim.ols_include_lag,
                     "include the lagged outcome in the OLS projection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    if (simulate->parsed()) return cmd_simulate(sim);
    if (replicate->parsed()) return cmd_replicate(rep);
    if (analyze->parsed()) return cmd_analyze(ana);
    if (demo_cmd->parsed()) return cmd_demo(demo);
    if (limits->parsed()) return cmd_limits(lim);
    return kExitConfig;
}
