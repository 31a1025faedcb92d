#include "hetfed/harness.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace hetfed;
using namespace hetfed::testing;

namespace {

std::string config_error_key(const std::vector<std::string>& args) {
  try {
    parse_config(args, "/data");
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

std::vector<RoundRecord> series(const std::vector<double>& cnn, const std::vector<double>& snn) {
  std::vector<RoundRecord> out;
  for (std::size_t i = 0; i < cnn.size(); ++i) {
    RoundRecord r;
    r.round = static_cast<int>(i) + 1;
    r.cnn_acc = cnn[i];
    r.snn_acc = snn[i];
    r.mean_loss = 0.05 * static_cast<double>(i);
    out.push_back(r);
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("defaults") {
    const RunConfig cfg = parse_config({}, "/data");
    CHECK(cfg.fed.clients == 10);
    CHECK(cfg.fed.uploads == 2);
    CHECK(cfg.fed.local_epochs == 2);
    CHECK(cfg.fed.batch_size == 64);
    CHECK(cfg.fed.lr == 0.1);
    CHECK(cfg.fed.rounds == 200);
    CHECK(cfg.fed.t_steps == 20);
    CHECK_FALSE(cfg.fed.alpha.has_value());
    CHECK(cfg.modes == std::vector<Mode>{Mode::sc_sc});
    CHECK(cfg.data_dir == "/data");
  }

  TEST_CASE("flags") {
    const RunConfig cfg = parse_config({"--mode", "S-S", "--clients", "20", "--uploads", "4",
                                        "--alpha", "0.5", "--lr=0.3", "--seed", "11"},
                                       "/data");
    CHECK(cfg.modes == std::vector<Mode>{Mode::s_s});
    CHECK(cfg.fed.clients == 20);
    CHECK(cfg.fed.uploads == 4);
    CHECK(cfg.fed.alpha == 0.5);
    CHECK(cfg.fed.lr == 0.3);
    CHECK(cfg.fed.seed == 11);
    CHECK(parse_config({"--mode", "all"}, "/data").modes.size() == 5);
    CHECK_FALSE(parse_config({"--alpha", "iid"}, "/data").fed.alpha.has_value());
    CHECK(parse_config({"--fraction", "0.2"}, "/data").fed.uploads == 2);
    CHECK(parse_config({"--fraction", "0.01", "--mode", "c-c"}, "/data").fed.uploads == 1);
  }

  TEST_CASE("configuration errors name the key") {
    CHECK(config_error_key({"--uploads", "20", "--clients", "10"}) == "uploads");
    CHECK(config_error_key({"--mode", "cs"}) == "mode");
    CHECK(config_error_key({"--lr", "fast"}) == "lr");
    CHECK(config_error_key({"--bogus", "1"}) == "bogus");
    CHECK(config_error_key({"--timesteps", "0"}) == "timesteps");
    CHECK(config_error_key({"--fraction", "1.5"}) == "fraction");
    CHECK(config_error_key({"--fraction", "0.2", "--uploads", "2"}) == "fraction");
    CHECK_THROWS_AS(parse_config({}), ConfigError);
    CHECK_THROWS_AS(parse_config({"--help"}, "/data"), HelpRequested);
  }

  TEST_CASE("config file supplies defaults that flags override") {
    const auto dir = scratch_dir("config");
    const auto file = dir / "run.cfg";
    {
      std::ofstream out(file);
      out << "# sweep\nclients = 20\nuploads = 4\nrounds = 7\ndata-dir = /from/file\n";
    }
    const RunConfig cfg = parse_config({"--config", file.string(), "--rounds", "9"}, "/env");
    CHECK(cfg.fed.clients == 20);
    CHECK(cfg.fed.uploads == 4);
    CHECK(cfg.fed.rounds == 9);
    CHECK(cfg.data_dir == "/from/file");

    {
      std::ofstream out(file);
      out << "colour = blue\n";
    }
    CHECK(config_error_key({"--config", file.string()}) == "colour");
  }

  TEST_CASE("suppression of a crossing pair of curves") {
    const auto recs = series({0.2, 0.5, 0.9}, {0.4, 0.5, 0.6});
    const Suppression s = compute_suppression(recs);
    REQUIRE(s.gap.size() == 3);
    CHECK(s.gap[0] == doctest::Approx(-0.2));
    CHECK(s.gap[1] == doctest::Approx(0.0));
    CHECK(s.gap[2] == doctest::Approx(0.3));
    CHECK(s.dominant == std::vector<Side>{Side::snn, Side::snn, Side::cnn});
    CHECK(s.switches == 1);
    CHECK(s.final_side == Side::cnn);
    CHECK(s.max_abs_gap == doctest::Approx(0.3));
    CHECK(s.mean_abs_gap == doctest::Approx(0.5 / 3.0));
    REQUIRE(s.spells.size() == 2);
    CHECK(s.spells[0].length == 2);
    CHECK(s.spells[1].first_round == 3);
  }

  TEST_CASE("suppression of identical and offset curves") {
    const auto same = compute_suppression(series({0.3, 0.6, 0.7}, {0.3, 0.6, 0.7}));
    for (double g : same.gap) CHECK(g == 0.0);
    CHECK(same.switches == 0);
    CHECK(same.final_side == Side::none);

    const auto offset = compute_suppression(series({0.5, 0.6, 0.7, 0.8}, {0.4, 0.5, 0.6, 0.7}));
    for (double g : offset.gap) CHECK(g == doctest::Approx(0.1));
    CHECK(offset.switches == 0);
    CHECK(offset.cnn_rounds == 4);
    CHECK(offset.final_side == Side::cnn);
  }

  TEST_CASE("metrics CSV round trip") {
    FederationConfig cfg;
    cfg.alpha = 0.5;
    const ExperimentOutput out = make_output(cfg, series({0.1234567, 0.5}, {0.25, 0.75}));
    const auto dir = scratch_dir("metrics");
    write_metrics_csv(out, dir / "metrics.csv");
    const std::string text = slurp(dir / "metrics.csv");
    CHECK(text.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
    const auto rows = read_metrics_csv(dir / "metrics.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].mode == "sc-sc");
    CHECK(rows[0].alpha == "0.5");
    CHECK(rows[0].clients == 10);
    CHECK(std::abs(rows[0].cnn_acc - 0.1234567) <= 1e-6);
    CHECK(std::abs(rows[1].gap - (0.5 - 0.75)) <= 1e-6);
    CHECK(std::abs(rows[1].mean_loss - 0.05) <= 1e-6);

    std::ofstream(dir / "bad.csv") << "round,accuracy\n1,0.5\n";
    CHECK_THROWS(read_metrics_csv(dir / "bad.csv"));
    CHECK_THROWS(read_metrics_csv(dir / "missing.csv"));
  }

  TEST_CASE("labels and best rounds") {
    FederationConfig cfg;
    CHECK(alpha_label(std::nullopt) == "iid");
    CHECK(alpha_label(0.125) == "0.125");
    CHECK(condition_name(cfg) == "n10_p2_iid");
    cfg.alpha = 0.5;
    CHECK(condition_name(cfg) == "n10_p2_alpha0.5");

    cfg.mode = Mode::c_c;
    const auto recs = series({0.3, 0.8, 0.8, 0.1}, {0.9, 0.1, 0.2, 0.95});
    CHECK(best_round(make_output(cfg, recs)) == 1);
    cfg.mode = Mode::s_s;
    CHECK(best_round(make_output(cfg, recs)) == 3);
    cfg.mode = Mode::sc_sc;
    CHECK(best_round(make_output(cfg, recs)) == 0);
  }

  TEST_CASE("plot data layout") {
    std::vector<ExperimentOutput> outputs;
    for (Mode m : kAllModes) {
      FederationConfig cfg;
      cfg.mode = m;
      outputs.push_back(make_output(cfg, series({0.2, 0.6}, {0.3, 0.4})));
    }
    const auto dir = scratch_dir("plots");
    emit_plot_data(outputs, dir);
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "n10_p2_iid")) {
      files += e.path().extension() == ".csv";
    }
    CHECK(files == 10);
    CHECK(slurp(dir / "n10_p2_iid" / "c-c_cnn.csv") == "round,accuracy\n1,0.200000\n2,0.600000\n");
    const std::string summary = slurp(dir / "summary.csv");
    CHECK(summary ==
          "condition,clients,uploads,alpha,c-c_cnn,s-s_snn,c-sc_cnn,c-sc_snn,s-sc_cnn,"
          "s-sc_snn,sc-sc_cnn,sc-sc_snn\n"
          "n10_p2_iid,10,2,iid,0.600000,0.400000,0.600000,0.400000,0.600000,0.400000,"
          "0.600000,0.400000\n");
  }
}
