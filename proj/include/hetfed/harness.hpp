#pragma once

#include "hetfed/federation.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hetfed {

inline constexpr const char* kDataDirEnv = "HETFED_DATA_DIR";

struct RunConfig {
  FederationConfig fed;
  std::vector<Mode> modes{Mode::sc_sc};  // "--mode all" runs every mode in order
  std::filesystem::path data_dir;
  std::filesystem::path out_dir = "out";
  std::optional<std::size_t> subset;       // first M training samples
  std::optional<std::size_t> test_subset;  // first M test samples
  std::optional<std::filesystem::path> checkpoint;  // rewritten after every round
  std::optional<std::filesystem::path> resume;
};

/// `--help` was given; what() holds the usage text.
class HelpRequested : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses command-line arguments (without the program name). A `--config
/// FILE` of `key = value` lines supplies defaults that flags override. The data
/// directory falls back to `env_data_dir` when no flag or file sets it.
/// Throws ConfigError naming the offending key.
RunConfig parse_config(const std::vector<std::string>& args,
                       std::optional<std::string> env_data_dir = std::nullopt);

/// Reads HETFED_DATA_DIR and forwards to parse_config.
RunConfig parse_config_from_env(const std::vector<std::string>& args);

enum class Side { none, cnn, snn };
std::string_view to_string(Side side);

struct Spell {
  Side side = Side::none;
  int first_round = 0;
  int length = 0;
};

/// Accuracy gap analytics. gap = cnn_acc - snn_acc per round; the dominant
/// side follows the gap's sign, a zero gap keeping the previous side.
struct Suppression {
  std::vector<double> gap;
  std::vector<Side> dominant;
  int switches = 0;
  double mean_abs_gap = 0;
  double max_abs_gap = 0;
  Side final_side = Side::none;
  int cnn_rounds = 0;
  int snn_rounds = 0;
  std::vector<Spell> spells;  // maximal runs of one dominant side
};

Suppression compute_suppression(std::span<const RoundRecord> records);

struct ExperimentOutput {
  FederationConfig config;
  Mode mode = Mode::sc_sc;  // effective mode
  std::vector<RoundRecord> records;
  Suppression suppression;
};

ExperimentOutput make_output(const FederationConfig& cfg, std::vector<RoundRecord> records);

inline constexpr const char* kMetricsHeader =
    "round,mode,alpha,clients,uploads,cnn_acc,snn_acc,gap,mean_loss";

/// "iid" or the shortest round-trip decimal of alpha.
std::string alpha_label(const std::optional<double>& alpha);

std::string format_metrics_csv(std::span<const ExperimentOutput> outputs);
void write_metrics_csv(std::span<const ExperimentOutput> outputs,
                       const std::filesystem::path& path);
void write_metrics_csv(const ExperimentOutput& output, const std::filesystem::path& path);

struct MetricsRow {
  int round = 0;
  std::string mode;
  std::string alpha;
  std::size_t clients = 0;
  std::size_t uploads = 0;
  double cnn_acc = 0;
  double snn_acc = 0;
  double gap = 0;
  double mean_loss = 0;
};

/// Throws std::runtime_error on a missing file, wrong header or bad row.
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Data condition of a run, e.g. "n10_p2_iid" or "n10_p2_alpha0.5".
std::string condition_name(const FederationConfig& cfg);

/// Index of the best round for the summary table: the matching evaluator for
/// c-c and s-s, otherwise the mean of both. Earliest round wins ties.
std::size_t best_round(const ExperimentOutput& output);

/// Writes <dir>/<condition>/<mode>_{cnn,snn}.csv with "round,accuracy" rows
/// for every output, and <dir>/summary.csv with one row per condition and one
/// column per (mode, evaluator) pair.
void emit_plot_data(std::span<const ExperimentOutput> outputs, const std::filesystem::path& dir);

}  // namespace hetfed
