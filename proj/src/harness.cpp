#include "hetfed/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace hetfed {
namespace {

struct KeyInfo {
  std::string key;
  std::string help;
};

// Every key accepted both as --key on the command line and in a config file.
const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      {"mode", "c-c, s-s, c-sc, s-sc, sc-sc or all (default sc-sc)"},
      {"clients", "number of clients K (default 10)"},
      {"uploads", "uploads per round P (default 2)"},
      {"fraction", "participation fraction C; sets P = max(round(C K), 1)"},
      {"rounds", "global rounds (default 200)"},
      {"local-epochs", "local epochs E (default 2)"},
      {"batch-size", "mini-batch size B (default 64)"},
      {"lr", "learning rate (default 0.1)"},
      {"timesteps", "SNN time steps T (default 20)"},
      {"alpha", "Dirichlet concentration, or iid (default iid)"},
      {"seed", "master seed (default 0)"},
      {"data-dir", "directory with the MNIST IDX files (falls back to HETFED_DATA_DIR)"},
      {"out", "output directory (default out)"},
      {"subset", "use the first M training images"},
      {"test-subset", "use the first M test images"},
      {"client-kinds", "auto, cnn, snn or mixed (default auto)"},
      {"reset", "IF reset: hard or subtract (default hard)"},
      {"threshold", "IF firing threshold (default 1)"},
      {"surrogate-alpha", "surrogate sigmoid slope (default 4)"},
      {"checkpoint", "rewrite this checkpoint file after every round"},
      {"resume", "continue from a checkpoint file"}};
  return keys;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

// Turns `key = value` lines into --key value tokens.
std::vector<std::string> config_file_tokens(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config", path.string() + ":" + std::to_string(line_no) +
                                      ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& keys = known_keys();
    if (std::none_of(keys.begin(), keys.end(), [&](const KeyInfo& k) { return k.key == key; })) {
      throw ConfigError(key, "unknown key in " + path.string());
    }
    tokens.push_back("--" + key);
    tokens.push_back(value);
  }
  return tokens;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError(key, "cannot parse '" + text + "'");
  }
  return value;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  if (!text.empty() && text.front() == '-') throw ConfigError(key, "must not be negative");
  return parse_number<std::size_t>(key, text);
}

std::string fixed6(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("error while writing " + path.string());
}

}  // namespace

RunConfig parse_config(const std::vector<std::string>& args,
                       std::optional<std::string> env_data_dir) {
  CLI::App app{"Heterogeneous CNN/SNN federated learning simulator", "hetfed"};
  app.allow_extras(true);
  std::map<std::string, std::string> values;
  for (const auto& [key, help] : known_keys()) {
    app.add_option("--" + key, values[key], help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  std::string config_path;
  app.add_option("--config", config_path, "key = value file; flags override it");

  // First pass only locates --config.
  std::vector<std::string> tokens;
  {
    CLI::App pre;
    pre.allow_extras(true);
    pre.set_help_flag();
    std::string path;
    pre.add_option("--config", path);
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
      pre.parse(rev);
    } catch (const CLI::ParseError& e) {
      throw ConfigError("config", e.what());
    }
    if (!path.empty()) tokens = config_file_tokens(path);
  }
  tokens.insert(tokens.end(), args.begin(), args.end());
  std::vector<std::string> rev(tokens.rbegin(), tokens.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested(app.help());
  } catch (const CLI::ParseError& e) {
    throw ConfigError("arguments", e.what());
  }
  if (const auto extra = app.remaining(); !extra.empty()) {
    std::string key = extra.front();
    key.erase(0, key.find_first_not_of('-'));
    throw ConfigError(key.substr(0, key.find('=')), "unknown option '" + extra.front() + "'");
  }

  auto given = [&](const std::string& key) { return app.get_option("--" + key)->count() > 0; };
  RunConfig rc;
  FederationConfig& f = rc.fed;
  if (given("mode")) {
    const std::string& m = values["mode"];
    if (m == "all") {
      rc.modes.assign(std::begin(kAllModes), std::end(kAllModes));
    } else if (const auto mode = parse_mode(m)) {
      rc.modes = {*mode};
    } else {
      throw ConfigError("mode", "unknown mode '" + m + "' (c-c, s-s, c-sc, s-sc, sc-sc, all)");
    }
  }
  f.mode = rc.modes.front();
  if (given("clients")) f.clients = parse_count("clients", values["clients"]);
  if (given("uploads")) f.uploads = parse_count("uploads", values["uploads"]);
  if (given("fraction")) {
    if (given("uploads")) throw ConfigError("fraction", "give either uploads or fraction, not both");
    f.uploads = uploads_for_fraction(parse_number<double>("fraction", values["fraction"]), f.clients);
  }
  if (given("rounds")) f.rounds = parse_number<int>("rounds", values["rounds"]);
  if (given("local-epochs")) f.local_epochs = parse_number<int>("local-epochs", values["local-epochs"]);
  if (given("batch-size")) f.batch_size = parse_count("batch-size", values["batch-size"]);
  if (given("lr")) f.lr = parse_number<double>("lr", values["lr"]);
  if (given("timesteps")) f.t_steps = parse_number<Index>("timesteps", values["timesteps"]);
  if (given("alpha")) {
    const std::string& a = values["alpha"];
    if (a == "iid" || a == "none") {
      f.alpha.reset();
    } else {
      f.alpha = parse_number<double>("alpha", a);
    }
  }
  if (given("seed")) f.seed = parse_number<std::uint64_t>("seed", values["seed"]);
  if (given("client-kinds")) {
    const auto layout = parse_layout(values["client-kinds"]);
    if (!layout) {
      throw ConfigError("client-kinds", "expected auto, cnn, snn or mixed, got '" +
                                            values["client-kinds"] + "'");
    }
    f.layout = *layout;
  }
  if (given("reset")) {
    const std::string& r = values["reset"];
    if (r == "hard") {
      f.neuron.reset = ResetMode::hard;
    } else if (r == "subtract") {
      f.neuron.reset = ResetMode::subtract;
    } else {
      throw ConfigError("reset", "expected hard or subtract, got '" + r + "'");
    }
  }
  if (given("threshold")) f.neuron.threshold = parse_number<double>("threshold", values["threshold"]);
  if (given("surrogate-alpha")) {
    f.neuron.surrogate.alpha = parse_number<double>("surrogate-alpha", values["surrogate-alpha"]);
  }
  if (given("subset")) rc.subset = parse_count("subset", values["subset"]);
  if (given("test-subset")) rc.test_subset = parse_count("test-subset", values["test-subset"]);
  if (given("out")) rc.out_dir = values["out"];
  if (given("checkpoint")) rc.checkpoint = values["checkpoint"];
  if (given("resume")) rc.resume = values["resume"];
  if (given("data-dir")) {
    rc.data_dir = values["data-dir"];
  } else if (env_data_dir && !env_data_dir->empty()) {
    rc.data_dir = *env_data_dir;
  }
  if (rc.data_dir.empty()) {
    throw ConfigError("data-dir", std::string("not set; pass --data-dir or set ") + kDataDirEnv);
  }
  if (rc.subset && *rc.subset == 0) throw ConfigError("subset", "must be >= 1");
  if (rc.test_subset && *rc.test_subset == 0) throw ConfigError("test-subset", "must be >= 1");
  if (rc.resume && rc.modes.size() > 1) {
    throw ConfigError("resume", "cannot resume a multi-mode run");
  }
  for (Mode m : rc.modes) {
    FederationConfig copy = f;
    copy.mode = m;
    copy.validate();
  }
  return rc;
}

RunConfig parse_config_from_env(const std::vector<std::string>& args) {
  const char* env = std::getenv(kDataDirEnv);
  return parse_config(args, env ? std::optional<std::string>(env) : std::nullopt);
}

std::string_view to_string(Side side) {
  switch (side) {
    case Side::none: return "none";
    case Side::cnn: return "cnn";
    case Side::snn: return "snn";
  }
  return "?";
}

Suppression compute_suppression(std::span<const RoundRecord> records) {
  if (records.empty()) throw std::invalid_argument("compute_suppression: no records");
  Suppression s;
  Side previous = Side::none;
  double abs_sum = 0.0;
  for (const auto& r : records) {
    const double gap = r.cnn_acc - r.snn_acc;
    const Side side = gap > 0 ? Side::cnn : gap < 0 ? Side::snn : previous;
    if (side != previous && previous != Side::none) ++s.switches;
    if (s.spells.empty() || s.spells.back().side != side) {
      s.spells.push_back({side, r.round, 0});
    }
    ++s.spells.back().length;
    if (side == Side::cnn) ++s.cnn_rounds;
    if (side == Side::snn) ++s.snn_rounds;
    s.gap.push_back(gap);
    s.dominant.push_back(side);
    abs_sum += std::abs(gap);
    s.max_abs_gap = std::max(s.max_abs_gap, std::abs(gap));
    previous = side;
  }
  s.mean_abs_gap = abs_sum / static_cast<double>(records.size());
  s.final_side = previous;
  return s;
}

ExperimentOutput make_output(const FederationConfig& cfg, std::vector<RoundRecord> records) {
  ExperimentOutput out{cfg, effective_mode(cfg), std::move(records), {}};
  out.suppression = compute_suppression(out.records);
  return out;
}

std::string alpha_label(const std::optional<double>& alpha) {
  if (!alpha) return "iid";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, *alpha);
  return std::string(buf, res.ptr);
}

std::string format_metrics_csv(std::span<const ExperimentOutput> outputs) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& o : outputs) {
    const std::string prefix = "," + std::string(to_string(o.mode)) + "," +
                               alpha_label(o.config.alpha) + "," +
                               std::to_string(o.config.clients) + "," +
                               std::to_string(o.config.uploads) + ",";
    for (const auto& r : o.records) {
      text += std::to_string(r.round) + prefix + fixed6(r.cnn_acc) + "," + fixed6(r.snn_acc) +
              "," + fixed6(r.cnn_acc - r.snn_acc) + "," + fixed6(r.mean_loss) + "\n";
    }
  }
  return text;
}

void write_metrics_csv(std::span<const ExperimentOutput> outputs,
                       const std::filesystem::path& path) {
  std::ofstream out = open_for_write(path);
  out << format_metrics_csv(outputs);
  finish(out, path);
}

void write_metrics_csv(const ExperimentOutput& output, const std::filesystem::path& path) {
  write_metrics_csv(std::span(&output, 1), path);
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error(path.string() + ": unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 9) {
      throw std::runtime_error(path.string() + ": row " + std::to_string(rows.size() + 1) +
                               " has " + std::to_string(f.size()) + " fields");
    }
    try {
      rows.push_back({parse_number<int>("round", f[0]), f[1], f[2],
                      parse_count("clients", f[3]), parse_count("uploads", f[4]),
                      parse_number<double>("cnn_acc", f[5]),
                      parse_number<double>("snn_acc", f[6]), parse_number<double>("gap", f[7]),
                      parse_number<double>("mean_loss", f[8])});
    } catch (const ConfigError& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
  }
  return rows;
}

std::string condition_name(const FederationConfig& cfg) {
  return "n" + std::to_string(cfg.clients) + "_p" + std::to_string(cfg.uploads) + "_" +
         (cfg.alpha ? "alpha" + alpha_label(cfg.alpha) : std::string("iid"));
}

std::size_t best_round(const ExperimentOutput& output) {
  if (output.records.empty()) throw std::invalid_argument("best_round: no records");
  auto score = [&](const RoundRecord& r) {
    if (output.mode == Mode::c_c) return r.cnn_acc;
    if (output.mode == Mode::s_s) return r.snn_acc;
    return (r.cnn_acc + r.snn_acc) / 2.0;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < output.records.size(); ++i) {
    if (score(output.records[i]) > score(output.records[best])) best = i;
  }
  return best;
}

void emit_plot_data(std::span<const ExperimentOutput> outputs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  struct Row {
    const FederationConfig* cfg;
    std::map<std::string, std::string> cells;
  };
  std::vector<std::pair<std::string, Row>> summary;  // first-seen condition order

  for (const auto& o : outputs) {
    const std::string cond = condition_name(o.config);
    const std::string mode(to_string(o.mode));
    for (const bool cnn : {true, false}) {
      const auto path = dir / cond / (mode + (cnn ? "_cnn.csv" : "_snn.csv"));
      std::ofstream out = open_for_write(path);
      out << "round,accuracy\n";
      for (const auto& r : o.records) {
        out << r.round << ',' << fixed6(cnn ? r.cnn_acc : r.snn_acc) << '\n';
      }
      finish(out, path);
    }

    auto it = std::find_if(summary.begin(), summary.end(),
                           [&](const auto& entry) { return entry.first == cond; });
    if (it == summary.end()) {
      summary.push_back({cond, Row{&o.config, {}}});
      it = std::prev(summary.end());
    }
    if (o.records.empty()) continue;
    const RoundRecord& best = o.records[best_round(o)];
    if (o.mode != Mode::s_s) it->second.cells[mode + "_cnn"] = fixed6(best.cnn_acc);
    if (o.mode != Mode::c_c) it->second.cells[mode + "_snn"] = fixed6(best.snn_acc);
  }

  const std::vector<std::string> columns = {"c-c_cnn",  "s-s_snn",  "c-sc_cnn",  "c-sc_snn",
                                            "s-sc_cnn", "s-sc_snn", "sc-sc_cnn", "sc-sc_snn"};
  const auto path = dir / "summary.csv";
  std::ofstream out = open_for_write(path);
  out << "condition,clients,uploads,alpha";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (const auto& [cond, row] : summary) {
    out << cond << ',' << row.cfg->clients << ',' << row.cfg->uploads << ','
        << alpha_label(row.cfg->alpha);
    for (const auto& c : columns) {
      out << ',';
      if (const auto cell = row.cells.find(c); cell != row.cells.end()) out << cell->second;
    }
    out << '\n';
  }
  finish(out, path);
}

}  // namespace hetfed
