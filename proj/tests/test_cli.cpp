#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kWorkDir = fs::temp_directory_path() / "tte_cli_tests";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TTE_CLI_PATH) + " " + args + " 2>" +
                            (kWorkDir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string stderr_text() {
    std::ifstream in(kWorkDir / "stderr.txt");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

long count_lines(const std::string& text) {
    long n = 0;
    for (char c : text) n += c == '\n' ? 1 : 0;
    return n;
}

struct Setup {
    Setup() {
        fs::create_directories(kWorkDir);
        write(kWorkDir / "setting1.json",
              "{\"design\":\"calendar\",\"tau\":2,\"effect_schedule\":\"constant\","
              "\"outcome_family\":\"continuous\"}");
        write(kWorkDir / "setting2_visit.json",
              "{\"design\":\"visit\",\"tau\":2,\"effect_schedule\":\"linear_in_t\","
              "\"outcome_family\":\"continuous\"}");
        write(kWorkDir / "broken.json", "{\"design\":");
    }
};

const Setup setup_once;

}  // namespace

TEST_CASE("simulate: deterministic csv output") {
    const auto out1 = kWorkDir / "sim1.csv";
    const auto out2 = kWorkDir / "sim2.csv";
    CHECK(run_cli("simulate --config " + (kWorkDir / "setting1.json").string() +
                  " --n 100 --seed 7 --out " + out1.string()) == 0);
    CHECK(run_cli("simulate --config " + (kWorkDir / "setting1.json").string() +
                  " --n 100 --seed 7 --out " + out2.string()) == 0);
    const auto a = slurp(out1);
    CHECK(a == slurp(out2));
    CHECK(a.rfind("id,t,elig,treat,y,L\n", 0) == 0);
    // at most n rows per visit plus the header; entrants replace exits
    CHECK(count_lines(a) <= 1 + 100 * 2);
    CHECK(count_lines(a) > 100);
}

TEST_CASE("simulate: malformed config exits 2") {
    CHECK(run_cli("simulate --config " + (kWorkDir / "broken.json").string() + " --n 10 --out " +
                  (kWorkDir / "x.csv").string()) == 2);
    CHECK(stderr_text().find("config error") != std::string::npos);
}

TEST_CASE("simulate: counterfactual table on request") {
    const auto out = kWorkDir / "sim_cf.csv";
    const auto cf = kWorkDir / "sim_cf_table.csv";
    CHECK(run_cli("simulate --config " + (kWorkDir / "setting1.json").string() +
                  " --n 50 --seed 3 --out " + out.string() + " --cf-out " + cf.string()) == 0);
    CHECK(slurp(cf).rfind("id,t,y1,y0,propensity\n", 0) == 0);
}

TEST_CASE("replicate: small run produces the summary table") {
    const auto out = kWorkDir / "mc.csv";
    CHECK(run_cli("replicate --config " + (kWorkDir / "setting1.json").string() +
                  " --reps 12 --n 150 --seed 5 --oracle-n 100000 --out " + out.string()) == 0);
    const auto text = slurp(out);
    CHECK(text.rfind("estimator,estimand,method,estimate,bias,mean_se,sd,coverage,target,reps,n",
                     0) == 0);
    // four proposed estimators and two pooled-OLS target rows
    CHECK(count_lines(text) == 1 + 6);
    CHECK(text.find("psi_u_ipw") != std::string::npos);
    CHECK(text.find("pooled_ols_vs_psi_e") != std::string::npos);
}

TEST_CASE("replicate: zero reps exits 2") {
    CHECK(run_cli("replicate --config " + (kWorkDir / "setting1.json").string() +
                  " --reps 0 --n 100 --out " + (kWorkDir / "x.csv").string()) == 2);
}

TEST_CASE("analyze: visit-time csv end to end") {
    const auto data = kWorkDir / "visit.csv";
    CHECK(run_cli("simulate --config " + (kWorkDir / "setting2_visit.json").string() +
                  " --n 400 --seed 11 --out " + data.string()) == 0);
    const auto prefix = (kWorkDir / "ana").string();
    CHECK(run_cli("analyze --data " + data.string() +
                  " --design visit --estimand psi_b --method gcomp --out " + prefix) == 0);
    const auto est = slurp(prefix + "_estimates.csv");
    CHECK(est.rfind("estimand,method,scale,point,se,ci_lower,ci_upper\n", 0) == 0);
    CHECK(count_lines(est) == 2);
    CHECK(est.find("psi_b,gcomp,risk_difference,") != std::string::npos);
    // gcomp-only runs do not fit propensities, so no positivity csv
    CHECK_FALSE(fs::exists(prefix + "_positivity.csv"));
    CHECK(fs::exists(prefix + "_models.json"));

    SUBCASE("all estimands and methods with diagnostics") {
        const auto full = (kWorkDir / "ana_full").string();
        CHECK(run_cli("analyze --data " + data.string() + " --design visit --out " + full) == 0);
        const auto rows = slurp(full + "_estimates.csv");
        CHECK(count_lines(rows) == 1 + 6);  // 3 estimands x 2 methods
        const auto pos = slurp(full + "_positivity.csv");
        CHECK(pos.rfind("t,arm,bin,bin_lower,bin_upper,count", 0) == 0);
        const auto models = slurp(full + "_models.json");
        CHECK(models.find("propensity") != std::string::npos);
        CHECK(models.find("coefficients") != std::string::npos);
    }
}

TEST_CASE("analyze: an empty trial names the violated assumption") {
    // every patient initiates at t=1, so trial 2 has nobody eligible
    std::ostringstream csv;
    csv << "id,t,treat,y,L\n";
    for (int p = 0; p < 40; ++p) {
        csv << "p" << p << ",1,1," << (0.3 * p) << "," << (0.01 * p) << "\n";
        csv << "p" << p << ",2,1," << (0.2 * p) << "," << (0.01 * p) << "\n";
    }
    const auto data = kWorkDir / "empty_trial.csv";
    write(data, csv.str());
    CHECK(run_cli("analyze --data " + data.string() +
                  " --design visit --estimand psi_u --method ipw --out " +
                  (kWorkDir / "bad").string()) == 1);
    CHECK(stderr_text().find("positivity of eligibility") != std::string::npos);
}

TEST_CASE("demo-noncollapsibility: curve csv") {
    const auto out = kWorkDir / "demo.csv";
    CHECK(run_cli("demo-noncollapsibility --reps 3 --n 1500 --seed 2 --out " + out.string()) == 0);
    const auto text = slurp(out);
    CHECK(text.rfind("family,t,mean_estimate,sd_estimate,oracle\n", 0) == 0);
    CHECK(count_lines(text) == 1 + 10);
    CHECK(text.find("binary,1,") != std::string::npos);
    CHECK(text.find("continuous,5,") != std::string::npos);
}

TEST_CASE("limits: estimand oracle json to stdout file") {
    const auto out = kWorkDir / "limit.json";
    CHECK(run_cli("limits --config " + (kWorkDir / "setting1.json").string() +
                  " --estimator psi_u --mc-n 100000 --seed 4 --out " + out.string()) == 0);
    const auto text = slurp(out);
    CHECK(text.find("\"estimator\":\"psi_u\"") != std::string::npos);
    CHECK(text.find("\"limit\":") != std::string::npos);
    CHECK(text.find("\"mc_n\":100000") != std::string::npos);

    CHECK(run_cli("limits --config " + (kWorkDir / "setting1.json").string() +
                  " --estimator bogus --out " + out.string()) == 2);
}

TEST_CASE("unknown flags exit 2") {
    CHECK(run_cli("simulate --frobnicate 1") == 2);
    CHECK(run_cli("") == 2);
}
