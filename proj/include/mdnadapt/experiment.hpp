#pragma once

// Trial orchestration: train the source system, build the target domain,
// run every enabled method on shared adaptation subsamples, and write
// per-record and aggregate result tables.

#include "mdnadapt/adapt.hpp"
#include "mdnadapt/autoenc.hpp"
#include "mdnadapt/channels.hpp"
#include "mdnadapt/config.hpp"
#include "mdnadapt/mdn.hpp"
#include "mdnadapt/serialize.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace mdnadapt::experiment {

using config::ExperimentConfig;
using config::Method;
using io::Json;

/// Independent 64-bit stream seed from a base seed and integer tags.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::uint64_t trial_seed(const ExperimentConfig& cfg, int trial) {
  return derive_seed(cfg.seed, {static_cast<std::uint64_t>(trial)});
}

inline double rate_of(const autoenc::SystemShape& s) {
  return std::log2(static_cast<double>(s.m)) / static_cast<double>(s.d);
}

/// Concrete channel for one domain. `reference` anchors random mixtures;
/// `source` is reused when the target is declared identical to it.
inline channels::ChannelSpec materialize(const config::ChannelConfig& c, const autoenc::SystemShape& shape,
                                         const gmm::SymbolConstellation& reference, std::uint64_t seed,
                                         const channels::ChannelSpec* source = nullptr) {
  channels::ChannelSpec spec;
  if (c.kind == "source") {
    require(source != nullptr, "target channel 'source' needs the source channel");
    return *source;
  }
  if (c.kind == "random_gmm") {
    spec = channels::make_random_gmm_spec(reference, c.components, seed, rate_of(shape));
  } else {
    spec = channels::make_snr_channel(c.kind, c.snr_db, 1.0, rate_of(shape), c.sigma0, c.s_min_db);
  }
  spec.phase_max = c.phase_max;
  spec.iq_imbalance = c.iq_imbalance;
  spec.validate();
  return spec;
}

inline autoenc::ChannelSampler sampler(channels::ChannelSpec spec) {
  return [spec = std::move(spec)](const Matrix& z, std::span<const int> labels, Rng& rng) {
    Matrix x(z.rows(), z.cols());
    for (Eigen::Index n = 0; n < z.cols(); ++n) {
      x.col(n) = channels::apply_channel(spec, z.col(n), rng, labels[static_cast<std::size_t>(n)]);
    }
    return x;
  };
}

struct SourceSystem {
  std::uint64_t seed = 0;
  channels::ChannelSpec channel;
  autoenc::AutoencoderSystem system;
  autoenc::TrainingCurve curve;
  gmm::SymbolConstellation constellation;
  gmm::ConditionalMixture mixture;  // MDN prediction at the learned constellation
};

/// Fresh system with the encoder initialized to Gray-coded QAM (when m is a
/// square power of two), trained end to end on `channel`.
inline autoenc::AutoencoderSystem train_system(const autoenc::SystemShape& shape, const autoenc::TrainConfig& training,
                                               const channels::ChannelSpec& channel, Rng& rng,
                                               autoenc::TrainingCurve* curve = nullptr) {
  auto system = autoenc::make_system(shape, rng);
  try {
    if (shape.d == 2) system.encoder.fit_to(channels::qam_constellation(shape.m));
  } catch (const Error&) {
    // Not a square QAM size: keep the random initial constellation.
  }
  auto c = autoenc::train_autoencoder(system, sampler(channel), training, rng);
  if (curve != nullptr) *curve = std::move(c);
  return system;
}

inline SourceSystem finish_source(std::uint64_t seed, channels::ChannelSpec channel, autoenc::AutoencoderSystem system,
                                  autoenc::TrainingCurve curve = {}) {
  SourceSystem s;
  s.seed = seed;
  s.channel = std::move(channel);
  s.system = std::move(system);
  s.curve = std::move(curve);
  s.constellation = s.system.constellation();
  s.mixture = mdn::predict_mixture(s.system.mdn, s.constellation);
  return s;
}

inline SourceSystem prepare_source(const ExperimentConfig& cfg, int trial) {
  const auto seed = trial_seed(cfg, trial);
  Rng channel_rng(derive_seed(seed, {1}));
  const auto qam_ref = cfg.shape.d == 2 ? channels::qam_constellation(cfg.shape.m) : gmm::SymbolConstellation{};
  auto channel = materialize(cfg.source, cfg.shape, qam_ref, channel_rng());
  if (!cfg.source_checkpoint.empty()) {
    auto system = io::system_from_json(io::read_json(cfg.source_checkpoint));
    require(system.m() == cfg.shape.m && system.d() == cfg.shape.d, "source checkpoint does not match the configured m, d");
    return finish_source(seed, std::move(channel), std::move(system));
  }
  Rng rng(derive_seed(seed, {2}));
  autoenc::TrainingCurve curve;
  auto system = train_system(cfg.shape, cfg.training, channel, rng, &curve);
  return finish_source(seed, std::move(channel), std::move(system), std::move(curve));
}

inline adapt::TargetData to_target_data(const channels::Dataset& data) {
  adapt::TargetData t;
  require(!data.empty(), "empty dataset");
  t.x = Matrix(data.front().x.size(), static_cast<Eigen::Index>(data.size()));
  for (std::size_t n = 0; n < data.size(); ++n) t.x.col(static_cast<Eigen::Index>(n)) = data[n].x;
  t.labels = channels::labels_of(data);
  return t;
}

/// Mean log P(x | z) of labeled data under a conditional mixture.
inline double mean_cll(const gmm::ConditionalMixture& mix, const gmm::SymbolConstellation& c, const adapt::TargetData& data) {
  const gmm::PreparedMixture p(mix, c);
  double total = 0.0;
  for (Eigen::Index n = 0; n < data.size(); ++n) {
    const Vector xn = data.x.col(n);
    total += p.conditional_log_pdf(xn.data(), data.labels[static_cast<std::size_t>(n)]);
  }
  return total / static_cast<double>(data.size());
}

enum class FinetuneVariant { all, last_layer };

/// Copy of the system with the MDN fine-tuned on the target data (all layers
/// or heads only) and the decoder retrained on samples from the updated MDN.
inline autoenc::AutoencoderSystem run_baseline_finetune(const autoenc::AutoencoderSystem& source,
                                                        const gmm::SymbolConstellation& constellation,
                                                        const adapt::TargetData& data, FinetuneVariant variant,
                                                        const config::FinetuneConfig& ft, Rng& rng) {
  require(data.size() >= 1, "finetune: empty target data");
  auto system = source;
  mdn::ChannelPairs pairs{Matrix(constellation.d(), data.size()), data.x};
  for (Eigen::Index n = 0; n < data.size(); ++n)
    pairs.z.col(n) = constellation.symbols[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(n)])];
  mdn::TrainOptions opt;
  opt.epochs = ft.epochs;
  opt.learning_rate = ft.learning_rate;
  opt.batch_size = std::max(10, static_cast<int>(0.1 * static_cast<double>(data.size())));
  opt.heads_only = variant == FinetuneVariant::last_layer;
  mdn::train_mdn(system.mdn, pairs, opt, rng);
  if (ft.decoder_epochs > 0) {
    const auto labels = autoenc::uniform_labels(system.m(), static_cast<std::size_t>(ft.decoder_samples), rng);
    Matrix z(constellation.d(), static_cast<Eigen::Index>(labels.size()));
    for (std::size_t n = 0; n < labels.size(); ++n)
      z.col(static_cast<Eigen::Index>(n)) = constellation.symbols[static_cast<std::size_t>(labels[n])];
    const Matrix x = mdn::sample_channel_batch(system.mdn, z, rng);
    autoenc::train_decoder(system.decoder, x, labels, ft.decoder_epochs, ft.decoder_learning_rate, ft.decoder_batch, rng);
  }
  return system;
}

struct ResultRecord {
  std::string method;
  int n_per_class = 0;
  int trial = 0;
  std::uint64_t seed = 0;
  double ser = 0.0;
  double wall_ms = 0.0;
  Json diagnostics = Json::object();
};

struct TrialFailure {
  int trial = 0;
  std::string message;
};

struct ResultTable {
  std::vector<ResultRecord> records;
  std::vector<TrialFailure> failures;
};

inline int method_rank(const std::string& m) {
  const auto& all = config::all_methods();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (config::to_string(all[i]) == m) return static_cast<int>(i);
  return static_cast<int>(all.size());
}

inline void sort_records(std::vector<ResultRecord>& r) {
  std::stable_sort(r.begin(), r.end(), [](const ResultRecord& a, const ResultRecord& b) {
    if (a.trial != b.trial) return a.trial < b.trial;
    if (method_rank(a.method) != method_rank(b.method)) return method_rank(a.method) < method_rank(b.method);
    if (a.method != b.method) return a.method < b.method;
    return a.n_per_class < b.n_per_class;
  });
}

class Stopwatch {
 public:
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Everything after source training for one trial.
inline std::vector<ResultRecord> run_trial_with_source(const ExperimentConfig& cfg, int trial, const SourceSystem& src) {
  std::vector<ResultRecord> out;
  const auto seed = src.seed;
  const int m = cfg.shape.m;
  Rng channel_rng(derive_seed(seed, {3}));
  const auto target = materialize(cfg.target, cfg.shape, src.constellation, channel_rng(), &src.channel);
  Rng split_rng(derive_seed(seed, {4}));
  const auto train_split = channels::generate_dataset(target, src.constellation, cfg.train_per_class, split_rng);
  const auto test = to_target_data(channels::generate_dataset(target, src.constellation, cfg.test_per_class, split_rng));
  auto record = [&](Method method, int size, double ser, double ms, Json diag) {
    out.push_back({config::to_string(method), size, trial, seed, ser, ms, std::move(diag)});
  };

  if (cfg.has(Method::no_adapt)) {
    Stopwatch sw;
    const auto rep = autoenc::evaluate_ser(autoenc::as_classifier(src.system.decoder), test.x, test.labels, m);
    const double cll = mean_cll(src.mixture, src.constellation, test);
    const double ms = sw.ms();
    for (int size : cfg.sizes) record(Method::no_adapt, size, rep.ser, ms, {{"test_cll", cll}});
  }

  if (cfg.has(Method::retrain_oracle)) {
    Stopwatch sw;
    Rng rng(derive_seed(seed, {5}));
    const auto oracle = train_system(cfg.shape, cfg.training, target, rng);
    const auto oracle_c = oracle.constellation();
    Rng test_rng(derive_seed(seed, {6}));
    const auto oracle_test = to_target_data(channels::generate_dataset(target, oracle_c, cfg.test_per_class, test_rng));
    const auto rep = autoenc::evaluate_ser(autoenc::as_classifier(oracle.decoder), oracle_test.x, oracle_test.labels, m);
    const double ms = sw.ms();
    for (int size : cfg.sizes) record(Method::retrain_oracle, size, rep.ser, ms, Json::object());
  }

  for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
    const int size = cfg.sizes[si];
    Rng sub_rng(derive_seed(seed, {7, static_cast<std::uint64_t>(size)}));
    const auto subset = to_target_data(channels::stratified_subsample(train_split, m, size, sub_rng));

    for (auto [method, variant] : {std::pair{Method::finetune, FinetuneVariant::all},
                                   std::pair{Method::finetune_last, FinetuneVariant::last_layer}}) {
      if (!cfg.has(method)) continue;
      Stopwatch sw;
      Rng rng(derive_seed(seed, {8, static_cast<std::uint64_t>(method), static_cast<std::uint64_t>(size)}));
      const auto tuned = run_baseline_finetune(src.system, src.constellation, subset, variant, cfg.finetune, rng);
      const auto rep = autoenc::evaluate_ser(autoenc::as_classifier(tuned.decoder), test.x, test.labels, m);
      const double cll = mean_cll(mdn::predict_mixture(tuned.mdn, src.constellation), src.constellation, test);
      record(method, size, rep.ser, sw.ms(), {{"test_cll", cll}});
    }

    if (cfg.has(Method::proposed)) {
      Stopwatch sw;
      const auto result = adapt::adapt(src.mixture, src.constellation, subset, cfg.adaptation, &src.system.decoder);
      const adapt::AdaptedDecoder dec(src.system.decoder, src.mixture, result.psi_star, src.constellation);
      const auto rep = autoenc::evaluate_ser([&](const Matrix& x) { return dec.probabilities(x); }, test.x, test.labels, m);
      const double ms = sw.ms();
      Json diag = {{"lambda_star", result.lambda_star},
                   {"test_cll", mean_cll(result.target, src.constellation, test)},
                   {"iterations", result.records[result.best_index].iterations},
                   {"converged", result.records[result.best_index].converged}};
      if (cfg.evaluate_grid) {
        Json grid = Json::array();
        for (const auto& r : result.records) {
          if (r.failed) {
            grid.push_back(nullptr);
            continue;
          }
          const adapt::AdaptedDecoder g(src.system.decoder, src.mixture, r.psi, src.constellation);
          grid.push_back(
              autoenc::evaluate_ser([&](const Matrix& x) { return g.probabilities(x); }, test.x, test.labels, m).ser);
        }
        diag["grid_ser"] = std::move(grid);
        diag["grid_lambda"] = cfg.adaptation.lambda_grid;
      }
      record(Method::proposed, size, rep.ser, ms, std::move(diag));
    }
  }
  return out;
}

inline std::vector<ResultRecord> run_trial(const ExperimentConfig& cfg, int trial) {
  const auto src = prepare_source(cfg, trial);
  return run_trial_with_source(cfg, trial, src);
}

inline Json record_to_json(const ResultRecord& r) {
  return {{"method", r.method}, {"n_per_class", r.n_per_class}, {"trial", r.trial}, {"seed", r.seed},
          {"ser", r.ser},       {"wall_ms", r.wall_ms},         {"diagnostics", r.diagnostics}};
}

inline constexpr const char* kCsvHeader = "method,n_per_class,trial,ser,wall_ms";

inline std::string records_to_csv(const std::vector<ResultRecord>& records) {
  std::ostringstream ss;
  ss << kCsvHeader << "\n";
  for (const auto& r : records) {
    ss << r.method << "," << r.n_per_class << "," << r.trial << "," << io::format_double(r.ser) << ","
       << io::format_double(r.wall_ms) << "\n";
  }
  return ss.str();
}

inline std::vector<ResultRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kCsvHeader, "results csv: unexpected header");
  std::vector<ResultRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = io::split(line, ',');
    require(cells.size() == 5, "results csv: expected 5 columns");
    ResultRecord r;
    r.method = cells[0];
    r.n_per_class = std::stoi(cells[1]);
    r.trial = std::stoi(cells[2]);
    r.ser = std::stod(cells[3]);
    r.wall_ms = std::stod(cells[4]);
    out.push_back(std::move(r));
  }
  return out;
}

struct AggregateRow {
  std::string method;
  int n_per_class = 0;
  int count = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Per-(method, size) mean SER and standard error of the mean.
inline std::vector<AggregateRow> aggregate(const std::vector<ResultRecord>& records) {
  std::map<std::pair<int, std::pair<std::string, int>>, std::vector<double>> groups;
  for (const auto& r : records) groups[{method_rank(r.method), {r.method, r.n_per_class}}].push_back(r.ser);
  std::vector<AggregateRow> out;
  for (const auto& [key, values] : groups) {
    AggregateRow row;
    row.method = key.second.first;
    row.n_per_class = key.second.second;
    row.count = static_cast<int>(values.size());
    for (double v : values) row.mean += v;
    row.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - row.mean) * (v - row.mean);
      row.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1)) / std::sqrt(static_cast<double>(values.size()));
    }
    out.push_back(row);
  }
  return out;
}

inline std::string aggregate_to_csv(const std::vector<AggregateRow>& rows) {
  std::ostringstream ss;
  ss << "method,n_per_class,count,mean_ser,stderr_ser\n";
  for (const auto& r : rows) {
    ss << r.method << "," << r.n_per_class << "," << r.count << "," << io::format_double(r.mean) << ","
       << io::format_double(r.stderr_) << "\n";
  }
  return ss.str();
}

enum class Format { csv, json_lines };

/// Writes records.csv or records.jsonl plus aggregate.csv into `dir`.
inline void emit_results(const ResultTable& table, const std::filesystem::path& dir, Format format) {
  require(!table.records.empty(), "emit_results: empty result table");
  if (format == Format::csv) {
    io::write_text(dir / "records.csv", records_to_csv(table.records));
  } else {
    std::string lines;
    for (const auto& r : table.records) lines += record_to_json(r).dump() + "\n";
    io::write_text(dir / "records.jsonl", lines);
  }
  io::write_text(dir / "aggregate.csv", aggregate_to_csv(aggregate(table.records)));
  if (!table.failures.empty()) {
    std::string lines;
    for (const auto& f : table.failures) lines += Json{{"trial", f.trial}, {"error", f.message}}.dump() + "\n";
    io::write_text(dir / "failures.jsonl", lines);
  }
}

/// Append-only JSON-lines sink shared by workers.
class RecordSink {
 public:
  explicit RecordSink(std::filesystem::path path) : path_(std::move(path)) {
    if (!path_.empty()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      out_.open(path_, std::ios::trunc);
      require(static_cast<bool>(out_), "cannot open '" + path_.string() + "' for writing");
    }
  }

  void write(const std::vector<ResultRecord>& records) {
    std::lock_guard lock(mutex_);
    if (!out_.is_open()) return;
    for (const auto& r : records) out_ << record_to_json(r).dump() << "\n";
    out_.flush();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

/// All trials over a worker pool. Records stream to `stream_path` (if
/// non-empty) as trials finish; the returned table is sorted.
inline ResultTable run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& stream_path = {}) {
  cfg.validate();
  ResultTable table;
  RecordSink sink(stream_path);
  std::mutex mutex;
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int t = next++; t < cfg.trials; t = next++) {
      try {
        auto recs = run_trial(cfg, t);
        sink.write(recs);
        std::lock_guard lock(mutex);
        table.records.insert(table.records.end(), recs.begin(), recs.end());
      } catch (const std::exception& e) {
        std::lock_guard lock(mutex);
        table.failures.push_back({t, e.what()});
      }
    }
  };
  const int n_workers = std::min(cfg.workers, cfg.trials);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  sort_records(table.records);
  std::sort(table.failures.begin(), table.failures.end(), [](const auto& a, const auto& b) { return a.trial < b.trial; });
  return table;
}

}  // namespace mdnadapt::experiment
