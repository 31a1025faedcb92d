#pragma once

#include "hetfed/data.hpp"
#include "hetfed/models.hpp"
#include "hetfed/rng.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hetfed {

/// Aggregation modes. The first letter group names who uploads, the second
/// who receives the aggregate.
enum class Mode {
  c_c,    // CNN clients train and share among CNN clients
  s_s,    // SNN clients train and share among SNN clients
  c_sc,   // CNN clients train; every client receives the CNN aggregate
  s_sc,   // SNN clients train; every client receives the SNN aggregate
  sc_sc,  // both kinds train; fused aggregate goes to everyone
};

std::string_view to_string(Mode mode);
/// Accepts "c-c", "s-s", "c-sc", "s-sc", "sc-sc" (case-insensitive).
std::optional<Mode> parse_mode(std::string_view text);
inline constexpr Mode kAllModes[] = {Mode::c_c, Mode::s_s, Mode::c_sc, Mode::s_sc, Mode::sc_sc};

/// Which model kind each client holds.
enum class ClientLayout {
  by_mode,  // all CNN for c-c, all SNN for s-s, first half CNN otherwise
  all_cnn,
  all_snn,
  mixed,  // first K/2 CNN, the rest SNN
};

std::string_view to_string(ClientLayout layout);
std::optional<ClientLayout> parse_layout(std::string_view text);

/// Invalid configuration; `key()` names the offending setting.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct FederationConfig {
  std::size_t clients = 10;     // K
  std::size_t uploads = 2;      // P, uploads per round
  int local_epochs = 2;         // E
  std::size_t batch_size = 64;  // B
  double lr = 0.1;              // eta
  int rounds = 200;
  Mode mode = Mode::sc_sc;
  Index t_steps = 20;
  std::optional<double> alpha;  // Dirichlet concentration; absent means IID
  std::uint64_t seed = 0;
  ClientLayout layout = ClientLayout::by_mode;
  IFConfig neuron{};

  ModelOptions model_options() const { return {t_steps, neuron}; }

  /// Throws ConfigError naming the first offending key.
  void validate() const;
};

/// Uploads per round for a participation fraction C in (0, 1]: max(round(C K), 1),
/// halves rounding away from zero.
/// Throws ConfigError("fraction") outside that range.
std::size_t uploads_for_fraction(double fraction, std::size_t clients);

struct ClientSpec {
  std::size_t id = 0;
  ModelKind kind = ModelKind::cnn;
  std::vector<std::size_t> shard;  // indices into the training set

  std::size_t n_samples() const { return shard.size(); }
};

/// Client kinds for `cfg` (ids 0..K-1, shards attached from `partition`).
std::vector<ClientSpec> make_clients(const FederationConfig& cfg, const Partition& partition);

/// The mode a run actually exercises once the client layout is known: a fused
/// or cross-kind mode over clients of a single kind reduces to c-c or s-s.
Mode effective_mode(const FederationConfig& cfg);

struct RoundRecord {
  int round = 0;  // 1-based
  std::vector<std::size_t> selected;
  double cnn_acc = 0;
  double snn_acc = 0;
  double mean_loss = 0;
  double wall_seconds = 0;
};

struct LocalUpdate {
  std::size_t client_id = 0;
  ParamSetF params;
  std::size_t n_samples = 0;  // n_k
  double loss_sum = 0;        // sum of batch losses
  std::size_t batches = 0;
};

/// E epochs of mini-batch SGD over the client's shard, starting from a copy
/// of `global`. The shard is reshuffled every epoch and SNN inputs are
/// encoded from the client's per-round stream.
LocalUpdate client_update(const ParamSetF& global, const ClientSpec& client,
                          const Dataset& train, const FederationConfig& cfg, int round);

/// The client's random stream for one round (shuffling and encoding).
Rng client_stream(std::uint64_t master_seed, std::size_t client_id, int round);

/// Sample-count weighted mean of every tensor, running statistics included.
/// Terms are summed in ascending client-id order in double precision.
ParamSetF aggregate(const std::vector<LocalUpdate>& updates);

/// Uniform sampling without replacement from the pool(s) eligible under
/// `mode`; returns ascending ids.
std::vector<std::size_t> select_clients(Mode mode, const std::vector<ClientSpec>& clients,
                                        std::size_t uploads, Rng& rng);

struct RoundOutcome {
  ParamSetF global;
  RoundRecord record;
};

RoundOutcome run_round(const ParamSetF& global, const std::vector<ClientSpec>& clients,
                       const FederationConfig& cfg, int round, const Dataset& train,
                       const Dataset& test);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  ParamSetF final_params;
};

/// Optional resume point: continue after `completed_rounds` from `params`.
struct ResumeState {
  int completed_rounds = 0;
  ParamSetF params;
};

using RoundCallback = std::function<void(const RoundRecord&, const ParamSetF&)>;

/// Validates `cfg`, initializes the global parameters and the partition from
/// the master seed, and runs the remaining rounds.
ExperimentResult run_experiment(const FederationConfig& cfg, const Dataset& train,
                                const Dataset& test,
                                const std::optional<ResumeState>& resume = std::nullopt,
                                const RoundCallback& on_round = {});

// -- checkpoints -----------------------------------------------------------------
//
// "HFCK" | u32 version | u64 master seed | u32 completed rounds | ParamSet container

struct Checkpoint {
  std::uint64_t seed = 0;
  int completed_rounds = 0;
  ParamSetF params;
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);

}  // namespace hetfed
