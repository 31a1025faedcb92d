#include "hetfed/federation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace hetfed {

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::c_c: return "c-c";
    case Mode::s_s: return "s-s";
    case Mode::c_sc: return "c-sc";
    case Mode::s_sc: return "s-sc";
    case Mode::sc_sc: return "sc-sc";
  }
  return "?";
}

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<ModelKind> client_kinds(const FederationConfig& cfg) {
  ClientLayout layout = cfg.layout;
  if (layout == ClientLayout::by_mode) {
    layout = cfg.mode == Mode::c_c   ? ClientLayout::all_cnn
             : cfg.mode == Mode::s_s ? ClientLayout::all_snn
                                     : ClientLayout::mixed;
  }
  std::vector<ModelKind> kinds(cfg.clients, ModelKind::cnn);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    if (layout == ClientLayout::all_snn ||
        (layout == ClientLayout::mixed && k >= cfg.clients / 2)) {
      kinds[k] = ModelKind::snn;
    }
  }
  return kinds;
}

bool uploads_cnn(Mode mode) { return mode == Mode::c_c || mode == Mode::c_sc || mode == Mode::sc_sc; }
bool uploads_snn(Mode mode) { return mode == Mode::s_s || mode == Mode::s_sc || mode == Mode::sc_sc; }

struct Pools {
  std::vector<std::size_t> cnn;
  std::vector<std::size_t> snn;
};

// Eligible uploaders per kind, ascending ids.
Pools eligible_pools(Mode mode, const std::vector<ModelKind>& kinds) {
  Pools pools;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    if (kinds[k] == ModelKind::cnn && uploads_cnn(mode)) pools.cnn.push_back(k);
    if (kinds[k] == ModelKind::snn && uploads_snn(mode)) pools.snn.push_back(k);
  }
  return pools;
}

std::vector<std::size_t> sample(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  return pool;
}

}  // namespace

std::optional<Mode> parse_mode(std::string_view text) {
  const std::string t = lower(text);
  for (Mode m : kAllModes) {
    if (t == to_string(m)) return m;
  }
  return std::nullopt;
}

std::string_view to_string(ClientLayout layout) {
  switch (layout) {
    case ClientLayout::by_mode: return "auto";
    case ClientLayout::all_cnn: return "cnn";
    case ClientLayout::all_snn: return "snn";
    case ClientLayout::mixed: return "mixed";
  }
  return "?";
}

std::optional<ClientLayout> parse_layout(std::string_view text) {
  const std::string t = lower(text);
  for (ClientLayout l : {ClientLayout::by_mode, ClientLayout::all_cnn, ClientLayout::all_snn,
                         ClientLayout::mixed}) {
    if (t == to_string(l)) return l;
  }
  return std::nullopt;
}

void FederationConfig::validate() const {
  if (clients < 1) throw ConfigError("clients", "must be >= 1");
  if (uploads < 1) throw ConfigError("uploads", "must be >= 1");
  if (uploads > clients) {
    throw ConfigError("uploads", std::to_string(uploads) + " exceeds the number of clients (" +
                                     std::to_string(clients) + ")");
  }
  if (local_epochs < 1) throw ConfigError("local-epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch-size", "must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr", "must be finite and >= 0");
  if (rounds < 1) throw ConfigError("rounds", "must be >= 1");
  if (t_steps < 1) throw ConfigError("timesteps", "must be >= 1");
  if (alpha && (!(*alpha > 0) || !std::isfinite(*alpha))) {
    throw ConfigError("alpha", "must be positive and finite");
  }
  if (!(neuron.threshold > 0)) throw ConfigError("threshold", "must be > 0");
  if (!(neuron.surrogate.alpha > 0)) throw ConfigError("surrogate-alpha", "must be > 0");

  const bool mixed = layout == ClientLayout::mixed ||
                     (layout == ClientLayout::by_mode && mode != Mode::c_c && mode != Mode::s_s);
  if (mixed && clients % 2 != 0) {
    throw ConfigError("clients", "must be even when CNN and SNN clients are mixed");
  }
  const Pools pools = eligible_pools(mode, client_kinds(*this));
  const std::string mode_name(to_string(mode));
  if (mode == Mode::sc_sc && !pools.cnn.empty() && !pools.snn.empty()) {
    if (uploads % 2 != 0) {
      throw ConfigError("uploads", "must be even for sc-sc with both client kinds");
    }
    if (uploads / 2 > std::min(pools.cnn.size(), pools.snn.size())) {
      throw ConfigError("uploads", std::to_string(uploads) + " exceeds the eligible pool (" +
                                       std::to_string(2 * std::min(pools.cnn.size(),
                                                                   pools.snn.size())) +
                                       ") of mode " + mode_name);
    }
  } else {
    const std::size_t pool = pools.cnn.size() + pools.snn.size();
    if (uploads > pool) {
      throw ConfigError("uploads", std::to_string(uploads) + " exceeds the eligible pool (" +
                                       std::to_string(pool) + ") of mode " + mode_name);
    }
  }
}

std::size_t uploads_for_fraction(double fraction, std::size_t clients) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction", "must lie in (0, 1]");
  const double p = std::round(fraction * static_cast<double>(clients));
  return std::max<std::size_t>(static_cast<std::size_t>(p), 1);
}

std::vector<ClientSpec> make_clients(const FederationConfig& cfg, const Partition& partition) {
  if (partition.clients() != cfg.clients) {
    throw std::invalid_argument("make_clients: partition has " +
                                std::to_string(partition.clients()) + " shards for " +
                                std::to_string(cfg.clients) + " clients");
  }
  const auto kinds = client_kinds(cfg);
  std::vector<ClientSpec> clients(cfg.clients);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    clients[k].id = k;
    clients[k].kind = kinds[k];
    clients[k].shard = partition.shards[k];
  }
  return clients;
}

Mode effective_mode(const FederationConfig& cfg) {
  const auto kinds = client_kinds(cfg);
  const bool any_cnn = std::find(kinds.begin(), kinds.end(), ModelKind::cnn) != kinds.end();
  const bool any_snn = std::find(kinds.begin(), kinds.end(), ModelKind::snn) != kinds.end();
  if (any_cnn && !any_snn && uploads_cnn(cfg.mode)) return Mode::c_c;
  if (any_snn && !any_cnn && uploads_snn(cfg.mode)) return Mode::s_s;
  return cfg.mode;
}

Rng client_stream(std::uint64_t master_seed, std::size_t client_id, int round) {
  return derive_stream(master_seed, StreamPurpose::client, client_id,
                       static_cast<std::uint64_t>(round));
}

LocalUpdate client_update(const ParamSetF& global, const ClientSpec& client,
                          const Dataset& train, const FederationConfig& cfg, int round) {
  if (client.shard.empty()) {
    throw std::invalid_argument("client_update: client " + std::to_string(client.id) +
                                " has an empty shard");
  }
  Rng rng = client_stream(cfg.seed, client.id, round);
  const ModelOptions options = cfg.model_options();
  LocalUpdate update{client.id, global, client.shard.size(), 0.0, 0};
  std::vector<std::size_t> order = client.shard;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Dataset part = train.subset(std::span(order).subspan(begin, end - begin));
      const Batch batch{part.images, part.labels};
      update.loss_sum += train_batch(update.params, client.kind, batch,
                                     static_cast<float>(cfg.lr), rng, options);
      ++update.batches;
    }
  }
  return update;
}

ParamSetF aggregate(const std::vector<LocalUpdate>& updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  std::vector<const LocalUpdate*> ordered;
  for (const auto& u : updates) {
    u.params.validate();
    ordered.push_back(&u);
  }
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const LocalUpdate* a, const LocalUpdate* b) {
                     return a->client_id < b->client_id;
                   });
  double total = 0.0;
  for (const auto* u : ordered) total += static_cast<double>(u->n_samples);
  if (!(total > 0.0)) throw std::invalid_argument("aggregate: total sample count is zero");

  // Collect every update's tensors in schema order.
  std::vector<std::vector<const TensorF*>> tensors(ordered.size());
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    ordered[i]->params.for_each(
        [&](std::string_view, const TensorF& t, bool) { tensors[i].push_back(&t); });
  }

  ParamSetF out = ParamSetF::zeros();
  std::size_t slot = 0;
  out.for_each([&](std::string_view, TensorF& target, bool) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(target.size());
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      const double weight = static_cast<double>(ordered[i]->n_samples) / total;
      acc += weight * tensors[i][slot]->values().cast<double>();
    }
    target.values() = acc.cast<float>();
    ++slot;
  });
  out.bn1.momentum = ordered.front()->params.bn1.momentum;
  out.bn1.epsilon = ordered.front()->params.bn1.epsilon;
  out.bn2.momentum = ordered.front()->params.bn2.momentum;
  out.bn2.epsilon = ordered.front()->params.bn2.epsilon;
  return out;
}

std::vector<std::size_t> select_clients(Mode mode, const std::vector<ClientSpec>& clients,
                                        std::size_t uploads, Rng& rng) {
  std::vector<ModelKind> kinds;
  for (const auto& c : clients) kinds.push_back(c.kind);
  Pools pools = eligible_pools(mode, kinds);
  auto ids = [&clients](const std::vector<std::size_t>& positions) {
    std::vector<std::size_t> out;
    for (std::size_t p : positions) out.push_back(clients[p].id);
    return out;
  };
  pools.cnn = ids(pools.cnn);
  pools.snn = ids(pools.snn);

  std::vector<std::size_t> chosen;
  if (mode == Mode::sc_sc && !pools.cnn.empty() && !pools.snn.empty()) {
    if (uploads % 2 != 0) {
      throw std::invalid_argument("select_clients: sc-sc needs an even number of uploads");
    }
    const std::size_t half = uploads / 2;
    if (half > pools.cnn.size() || half > pools.snn.size()) {
      throw std::invalid_argument("select_clients: uploads exceed the eligible pool");
    }
    chosen = sample(pools.cnn, half, rng);
    const auto snn = sample(pools.snn, half, rng);
    chosen.insert(chosen.end(), snn.begin(), snn.end());
  } else {
    std::vector<std::size_t> pool = pools.cnn;
    pool.insert(pool.end(), pools.snn.begin(), pools.snn.end());
    std::sort(pool.begin(), pool.end());
    if (uploads > pool.size()) {
      throw std::invalid_argument("select_clients: " + std::to_string(uploads) +
                                  " uploads exceed the eligible pool of " +
                                  std::to_string(pool.size()));
    }
    chosen = sample(pool, uploads, rng);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

RoundOutcome run_round(const ParamSetF& global, const std::vector<ClientSpec>& clients,
                       const FederationConfig& cfg, int round, const Dataset& train,
                       const Dataset& test) {
  const auto start = std::chrono::steady_clock::now();
  Rng selection = derive_stream(cfg.seed, StreamPurpose::selection, 0,
                                static_cast<std::uint64_t>(round));
  const std::vector<std::size_t> selected =
      select_clients(cfg.mode, clients, cfg.uploads, selection);

  std::vector<LocalUpdate> updates;
  updates.reserve(selected.size());
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t id : selected) {
    const auto it = std::find_if(clients.begin(), clients.end(),
                                 [id](const ClientSpec& c) { return c.id == id; });
    updates.push_back(client_update(global, *it, train, cfg, round));
    loss_sum += updates.back().loss_sum;
    batches += updates.back().batches;
  }

  RoundOutcome outcome{aggregate(updates), {}};
  RoundRecord& rec = outcome.record;
  rec.round = round;
  rec.selected = selected;
  rec.mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;

  const ModelOptions options = cfg.model_options();
  Rng eval = derive_stream(cfg.seed, StreamPurpose::evaluation, 0,
                           static_cast<std::uint64_t>(round));
  rec.cnn_acc = evaluate(outcome.global, ModelKind::cnn, test.images, test.labels, eval, options);
  rec.snn_acc = evaluate(outcome.global, ModelKind::snn, test.images, test.labels, eval, options);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

ExperimentResult run_experiment(const FederationConfig& cfg, const Dataset& train,
                                const Dataset& test, const std::optional<ResumeState>& resume,
                                const RoundCallback& on_round) {
  cfg.validate();
  if (train.size() < cfg.clients) {
    throw ConfigError("subset", "training set of " + std::to_string(train.size()) +
                                    " samples is smaller than the client count");
  }
  if (test.size() == 0) throw ConfigError("data-dir", "test set is empty");

  Rng partition_rng = derive_stream(cfg.seed, StreamPurpose::partition);
  const Partition partition =
      cfg.alpha ? partition_dirichlet(train.labels, cfg.clients, *cfg.alpha, partition_rng)
                : partition_iid(train.size(), cfg.clients, partition_rng);
  const std::vector<ClientSpec> clients = make_clients(cfg, partition);

  ExperimentResult result;
  int first_round = 1;
  if (resume) {
    resume->params.validate();
    result.final_params = resume->params;
    first_round = resume->completed_rounds + 1;
  } else {
    Rng init = derive_stream(cfg.seed, StreamPurpose::init);
    result.final_params = ParamSetF::initialize(init);
  }
  for (int round = first_round; round <= cfg.rounds; ++round) {
    RoundOutcome outcome = run_round(result.final_params, clients, cfg, round, train, test);
    result.final_params = std::move(outcome.global);
    if (on_round) on_round(outcome.record, result.final_params);
    result.records.push_back(std::move(outcome.record));
  }
  return result;
}

// -- checkpoints -------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'H', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: truncated header");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint) {
  out.write(kCheckpointMagic, 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, checkpoint.seed, 8);
  put_le(out, static_cast<std::uint64_t>(checkpoint.completed_rounds), 4);
  write_paramset(out, checkpoint.params);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (const auto version = get_le(in, 4); version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint cp;
  cp.seed = get_le(in, 8);
  cp.completed_rounds = static_cast<int>(get_le(in, 4));
  cp.params = read_paramset(in);
  return cp;
}

}  // namespace hetfed
