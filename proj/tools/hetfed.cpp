// Command-line driver: runs one or more aggregation modes and writes
// metrics, plot series and per-round checkpoints under --out.
#include "hetfed/harness.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace hetfed;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDataError = 2;
constexpr int kRuntimeError = 3;

std::filesystem::path checkpoint_path(const RunConfig& rc, Mode mode) {
  std::filesystem::path p = *rc.checkpoint;
  if (rc.modes.size() > 1) p += "." + std::string(to_string(mode));
  return p;
}

std::optional<ResumeState> load_resume(const RunConfig& rc) {
  if (!rc.resume) return std::nullopt;
  std::ifstream in(*rc.resume, std::ios::binary);
  if (!in) throw ConfigError("resume", "cannot open " + rc.resume->string());
  Checkpoint cp = read_checkpoint(in);
  if (cp.seed != rc.fed.seed) {
    throw ConfigError("resume", "checkpoint was written with seed " + std::to_string(cp.seed));
  }
  return ResumeState{cp.completed_rounds, std::move(cp.params)};
}

int run(const RunConfig& rc) {
  const Dataset train = to_dataset(load_mnist_split(rc.data_dir, true), rc.subset);
  const Dataset test = to_dataset(load_mnist_split(rc.data_dir, false), rc.test_subset);
  std::fprintf(stderr, "loaded %zu training and %zu test images from %s\n", train.size(),
               test.size(), rc.data_dir.string().c_str());
  const auto resume = load_resume(rc);

  std::vector<ExperimentOutput> outputs;
  for (Mode mode : rc.modes) {
    FederationConfig cfg = rc.fed;
    cfg.mode = mode;
    const std::string name(to_string(effective_mode(cfg)));
    auto on_round = [&](const RoundRecord& r, const ParamSetF& params) {
      std::fprintf(stderr, "[%s] round %d/%d cnn %.4f snn %.4f loss %.5f (%.1fs)\n",
                   name.c_str(), r.round, cfg.rounds, r.cnn_acc, r.snn_acc, r.mean_loss,
                   r.wall_seconds);
      if (rc.checkpoint) {
        const auto path = checkpoint_path(rc, mode);
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        write_checkpoint(out, {cfg.seed, r.round, params});
        if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
      }
    };
    ExperimentResult result = run_experiment(cfg, train, test, resume, on_round);
    outputs.push_back(make_output(cfg, std::move(result.records)));

    const Suppression& s = outputs.back().suppression;
    std::printf("%s %s: final cnn %.4f snn %.4f | dominant %s, %d switches, mean |gap| %.4f\n",
                name.c_str(), condition_name(cfg).c_str(), outputs.back().records.back().cnn_acc,
                outputs.back().records.back().snn_acc, std::string(to_string(s.final_side)).c_str(),
                s.switches, s.mean_abs_gap);
  }
  write_metrics_csv(outputs, rc.out_dir / "metrics.csv");
  emit_plot_data(outputs, rc.out_dir / "plots");
  std::printf("wrote %s\n", (rc.out_dir / "metrics.csv").string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  RunConfig rc;
  try {
    rc = parse_config_from_env(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const HelpRequested& help) {
    std::cout << help.what();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    return run(rc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
