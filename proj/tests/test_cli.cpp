#include "mdnadapt/config.hpp"
#include "mdnadapt/experiment.hpp"
#include "mdnadapt/serialize.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <tuple>

using namespace mdnadapt;
using namespace mdnadapt::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kData = MDNADAPT_TEST_DATA;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mdnadapt_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

config::ExperimentConfig tiny_config() { return config::load(kData / "tiny.toml"); }

experiment::ResultRecord make_record(std::string method, int n, int trial, double ser) {
  experiment::ResultRecord r;
  r.method = std::move(method);
  r.n_per_class = n;
  r.trial = trial;
  r.ser = ser;
  r.wall_ms = 1.5;
  return r;
}

bool same_nets(const neural::FeedForwardNet& a, const neural::FeedForwardNet& b) {
  const Vector fa = flatten(a), fb = flatten(b);
  return fa.size() == fb.size() && fa == fb;
}

}  // namespace

// ---------------------------------------------------------------------------
// TOML reader

TEST(Toml, TablesScalarsAndArrays) {
  const auto j = config::parse_toml(R"(
# comment
name = "a # not a comment"
seed = 7
flag = true
rate = 1.5e-3
[outer.inner]
list = [1, 2, 3]   # trailing
words = ["x", "y"]
)");
  EXPECT_EQ(j.at("name"), "a # not a comment");
  EXPECT_EQ(j.at("seed"), 7);
  EXPECT_EQ(j.at("flag"), true);
  EXPECT_DOUBLE_EQ(j.at("rate").get<double>(), 1.5e-3);
  EXPECT_EQ(j.at("outer").at("inner").at("list"), (io::Json{1, 2, 3}));
  EXPECT_EQ(j.at("outer").at("inner").at("words"), (io::Json{"x", "y"}));
}

TEST(Toml, MalformedInputThrows) {
  EXPECT_THROW(config::parse_toml("x = 1\nx = 2\n"), config::ConfigError);
  EXPECT_THROW(config::parse_toml("[broken\n"), config::ConfigError);
  EXPECT_THROW(config::parse_toml("just words\n"), config::ConfigError);
  EXPECT_THROW(config::parse_toml("= 3\n"), config::ConfigError);
  EXPECT_THROW(config::parse_toml("s = \"open\n"), config::ConfigError);
}

// ---------------------------------------------------------------------------
// Config loading

TEST(Config, DefaultsAreDeskScale) {
  const config::ExperimentConfig c;
  EXPECT_EQ(c.shape.m, 16);
  EXPECT_EQ(c.shape.d, 2);
  EXPECT_EQ(c.shape.k, 5);
  EXPECT_EQ(c.shape.hidden, 100);
  EXPECT_EQ(c.train_per_class, 1875);
  EXPECT_EQ(c.test_per_class, 1875);
  EXPECT_EQ(c.sizes, (std::vector<int>{5, 10, 20, 30, 40, 50}));
  EXPECT_EQ(c.methods.size(), 5u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, FullScaleSplit) {
  config::ExperimentConfig c;
  c.apply_full_scale();
  EXPECT_EQ(c.train_per_class * c.shape.m, 300000);
  EXPECT_EQ(c.test_per_class * c.shape.m, 300000);
  const auto j = config::parse_toml("[split]\nfull_scale = true\n");
  EXPECT_EQ(config::from_json(j).train_per_class, 18750);
}

TEST(Config, TomlFileLoads) {
  const auto c = tiny_config();
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.shape.m, 4);
  EXPECT_EQ(c.shape.hidden, 8);
  EXPECT_EQ(c.training.mdn_samples, 400);
  EXPECT_EQ(c.source.kind, "awgn");
  EXPECT_DOUBLE_EQ(c.target.snr_db, 14.0);
  EXPECT_EQ(c.sizes, (std::vector<int>{2, 3}));
  EXPECT_EQ(c.adaptation.lambda_grid, (std::vector<double>{0.01, 1.0}));
  EXPECT_EQ(c.finetune.decoder_samples, 200);
}

TEST(Config, JsonRoundTripAndEquivalentFile) {
  const auto c = tiny_config();
  const auto j = config::to_json(c);
  const auto back = config::from_json(j);
  EXPECT_EQ(config::to_json(back), j);

  const auto dir = scratch_dir("config_json");
  io::write_json(dir / "tiny.json", j);
  EXPECT_EQ(config::to_json(config::load(dir / "tiny.json")), j);
}

TEST(Config, ErrorsAreConfigErrors) {
  EXPECT_THROW(config::load(kData / "bad_config.toml"), config::ConfigError);
  EXPECT_THROW(config::load(kData / "does_not_exist.toml"), config::ConfigError);
  EXPECT_THROW(config::method_from_string("bogus"), config::ConfigError);

  auto parse = [](const std::string& text) { return config::from_json(config::parse_toml(text)); };
  EXPECT_THROW(parse("unknown = 1\n"), config::ConfigError);
  EXPECT_THROW(parse("methods = [\"no_adapt\", \"bogus\"]\n"), config::ConfigError);
  EXPECT_THROW(parse("sizes = [5, 4000]\n"), config::ConfigError);
  EXPECT_THROW(parse("sizes = [0]\n"), config::ConfigError);
  EXPECT_THROW(parse("trials = 0\n"), config::ConfigError);
  EXPECT_THROW(parse("[adaptation]\nmode = \"sideways\"\n"), config::ConfigError);
  EXPECT_THROW(parse("[adaptation]\nlambda_grid = []\n"), config::ConfigError);
  EXPECT_THROW(parse("[target]\nkind = \"teleport\"\n"), config::ConfigError);
  EXPECT_THROW(parse("[target]\nphase_max = 4.0\n"), config::ConfigError);
  EXPECT_THROW(parse("[system]\nd = 3\n[target]\nkind = \"ricean\"\n"), config::ConfigError);

  const auto dir = scratch_dir("config_bad_json");
  io::write_text(dir / "broken.json", "{\"name\": ");
  EXPECT_THROW(config::load(dir / "broken.json"), config::ConfigError);
}

TEST(Config, ShippedConfigsLoad) {
  const auto dir = kData.parent_path().parent_path() / "configs";
  int n = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    EXPECT_NO_THROW(config::load(entry.path())) << entry.path();
    ++n;
  }
  EXPECT_GE(n, 1);
}

TEST(Config, MethodNamesRoundTrip) {
  std::set<std::string> names;
  for (auto m : config::all_methods()) {
    names.insert(config::to_string(m));
    EXPECT_EQ(config::method_from_string(config::to_string(m)), m);
  }
  EXPECT_EQ(names, (std::set<std::string>{"no_adapt", "retrain_oracle", "finetune", "finetune_last", "proposed"}));
}

// ---------------------------------------------------------------------------
// Results tables

TEST(Results, CsvHeaderMatchesGoldenFile) {
  const auto golden = io::read_text(kData / "records_header.csv");
  const auto csv = experiment::records_to_csv({make_record("proposed", 5, 0, 0.25)});
  EXPECT_EQ(csv.substr(0, csv.find('\n') + 1), golden);
}

TEST(Results, CsvRoundTrip) {
  std::vector<experiment::ResultRecord> recs{make_record("no_adapt", 5, 0, 0.125), make_record("proposed", 10, 3, 0.0625)};
  recs[1].wall_ms = 1234.5;
  const auto back = experiment::records_from_csv(experiment::records_to_csv(recs));
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].method, recs[i].method);
    EXPECT_EQ(back[i].n_per_class, recs[i].n_per_class);
    EXPECT_EQ(back[i].trial, recs[i].trial);
    EXPECT_DOUBLE_EQ(back[i].ser, recs[i].ser);
    EXPECT_DOUBLE_EQ(back[i].wall_ms, recs[i].wall_ms);
  }
  EXPECT_THROW(experiment::records_from_csv("a,b\n"), Error);
  EXPECT_THROW(experiment::records_from_csv(std::string(experiment::kCsvHeader) + "\nx,1\n"), Error);
}

TEST(Results, AggregateMeanAndStderr) {
  const auto rows = experiment::aggregate({make_record("finetune", 5, 0, 0.1), make_record("finetune", 5, 1, 0.2),
                                           make_record("no_adapt", 5, 0, 0.3)});
  ASSERT_EQ(rows.size(), 2u);
  const auto& ft = rows[0].method == "finetune" ? rows[0] : rows[1];
  EXPECT_EQ(ft.count, 2);
  EXPECT_NEAR(ft.mean, 0.15, 1e-12);
  EXPECT_NEAR(ft.stderr_, 0.05, 1e-12);
  const auto& na = rows[0].method == "no_adapt" ? rows[0] : rows[1];
  EXPECT_EQ(na.count, 1);
  EXPECT_NEAR(na.mean, 0.3, 1e-12);
  EXPECT_EQ(na.stderr_, 0.0);
  const auto csv = experiment::aggregate_to_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,n_per_class,count,mean_ser,stderr_ser");
}

TEST(Results, SortOrder) {
  std::vector<experiment::ResultRecord> r{make_record("proposed", 5, 1, 0), make_record("no_adapt", 10, 0, 0),
                                          make_record("finetune", 5, 0, 0), make_record("no_adapt", 5, 0, 0)};
  experiment::sort_records(r);
  for (std::size_t i = 1; i < r.size(); ++i) {
    const auto key = [](const experiment::ResultRecord& x) {
      return std::tuple(x.trial, experiment::method_rank(x.method), x.n_per_class);
    };
    EXPECT_LE(key(r[i - 1]), key(r[i]));
  }
}

TEST(Results, EmitWritesFiles) {
  experiment::ResultTable table;
  table.records = {make_record("no_adapt", 5, 0, 0.1), make_record("proposed", 5, 0, 0.05)};
  const auto dir = scratch_dir("emit");
  experiment::emit_results(table, dir, experiment::Format::csv);
  EXPECT_TRUE(fs::exists(dir / "records.csv"));
  EXPECT_TRUE(fs::exists(dir / "aggregate.csv"));
  EXPECT_FALSE(fs::exists(dir / "failures.jsonl"));
  EXPECT_EQ(experiment::records_from_csv(io::read_text(dir / "records.csv")).size(), 2u);

  table.failures.push_back({1, "boom"});
  const auto dir2 = scratch_dir("emit_jsonl");
  experiment::emit_results(table, dir2, experiment::Format::json_lines);
  EXPECT_TRUE(fs::exists(dir2 / "records.jsonl"));
  EXPECT_TRUE(fs::exists(dir2 / "failures.jsonl"));
  EXPECT_NE(io::read_text(dir2 / "failures.jsonl").find("boom"), std::string::npos);

  EXPECT_THROW(experiment::emit_results(experiment::ResultTable{}, dir, experiment::Format::csv), Error);
}

// ---------------------------------------------------------------------------
// Seeds

TEST(Seeds, DerivedSeedsAreDistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t purpose = 1; purpose <= 8; ++purpose)
    for (std::uint64_t size = 0; size < 4; ++size) seen.insert(experiment::derive_seed(42, {purpose, size}));
  EXPECT_EQ(seen.size(), 32u);
  EXPECT_EQ(experiment::derive_seed(42, {3, 1}), experiment::derive_seed(42, {3, 1}));
  EXPECT_NE(experiment::derive_seed(42, {3, 1}), experiment::derive_seed(43, {3, 1}));
  auto cfg = tiny_config();
  EXPECT_NE(experiment::trial_seed(cfg, 0), experiment::trial_seed(cfg, 1));
}

// ---------------------------------------------------------------------------
// Serialization round trips

TEST(Serialize, DatasetCsvAndBinary) {
  Rng rng(5);
  const auto c = random_constellation(4, 2, rng);
  const auto spec = channels::make_snr_channel("awgn", 8.0, 1.0, 1.0);
  const auto data = channels::generate_dataset(spec, c, 7, rng);
  const auto dir = scratch_dir("dataset");

  const auto from_csv = io::dataset_from_csv(io::dataset_to_csv(data));
  io::write_dataset_binary(dir / "data.bin", data, io::to_json(spec), 5);
  const auto from_bin = io::read_dataset_binary(dir / "data.bin");
  ASSERT_EQ(from_csv.size(), data.size());
  ASSERT_EQ(from_bin.size(), data.size());
  for (std::size_t n = 0; n < data.size(); ++n) {
    EXPECT_EQ(from_csv[n].y, data[n].y);
    EXPECT_EQ(from_csv[n].x, data[n].x);
    EXPECT_EQ(from_csv[n].z, data[n].z);
    EXPECT_EQ(from_bin[n].y, data[n].y);
    EXPECT_EQ(from_bin[n].x, data[n].x);
    EXPECT_EQ(from_bin[n].z, data[n].z);
  }
  const auto meta = io::read_json(dir / "data.bin.json");
  EXPECT_EQ(meta.at("rows"), data.size());
  EXPECT_EQ(meta.at("seed"), 5);
}

TEST(Serialize, ChannelSpecsRoundTrip) {
  Rng rng(8);
  const auto qam = channels::qam_constellation(16);
  std::vector<channels::ChannelSpec> specs{channels::make_snr_channel("awgn", 10.0, 1.0, 2.0),
                                           channels::make_snr_channel("uniform_fading", 20.0, 1.0, 2.0),
                                           channels::make_snr_channel("ricean", 20.0, 1.0, 2.0),
                                           channels::make_random_gmm_spec(qam, 3, 99, 2.0)};
  specs[1].phase_max = 0.3;
  specs[1].iq_imbalance = 0.1;
  for (const auto& s : specs) {
    const auto j = io::to_json(s);
    EXPECT_EQ(io::to_json(io::channel_from_json(j)), j) << s.kind();
  }
}

TEST(Serialize, SystemCheckpointPredictsIdentically) {
  Rng rng(13);
  const auto system = autoenc::make_system({4, 2, 2, 6}, rng);
  io::ModelCard card;
  card.k = 2;
  card.d = 2;
  card.hidden = 6;
  card.seed = 13;
  card.channel = "awgn";
  const auto dir = scratch_dir("checkpoint");
  io::write_json(dir / "system.json", io::to_json(system, card));
  const auto j = io::read_json(dir / "system.json");
  const auto back = io::system_from_json(j);
  EXPECT_EQ(io::card_from_json(j.at("card")).seed, 13u);

  const auto c0 = system.constellation(), c1 = back.constellation();
  for (int y = 0; y < 4; ++y) EXPECT_EQ(c0.symbols[static_cast<std::size_t>(y)], c1.symbols[static_cast<std::size_t>(y)]);
  const Matrix x = Matrix::Random(2, 11);
  EXPECT_EQ(system.decoder.probabilities(x), back.decoder.probabilities(x));
  const auto m0 = mdn::predict_mixture(system.mdn, c0), m1 = mdn::predict_mixture(back.mdn, c1);
  EXPECT_EQ(io::to_json(m0), io::to_json(m1));

  auto wrong = j;
  wrong["format"] = "something/else";
  EXPECT_THROW(io::system_from_json(wrong), Error);
}

// ---------------------------------------------------------------------------
// Fine-tuning baselines

namespace {

struct SmallSource {
  experiment::SourceSystem src;
  channels::ChannelSpec target;
  channels::Dataset train;
  adapt::TargetData test;
};

const SmallSource& small_source() {
  static const SmallSource s = [] {
    SmallSource out;
    autoenc::TrainConfig tc;
    tc.n_ae = 10;
    tc.n_ce = 5;
    tc.mdn_samples = 4000;
    tc.ae_samples = 20000;
    const autoenc::SystemShape shape{4, 2, 3, 20};
    const auto channel = channels::make_snr_channel("awgn", 6.0, 1.0, 1.0);
    Rng rng(21);
    auto system = experiment::train_system(shape, tc, channel, rng);
    out.src = experiment::finish_source(21, channel, std::move(system));
    out.target = channels::make_snr_channel("uniform_fading", 14.0, 1.0, 1.0);
    Rng data_rng(22);
    out.train = channels::generate_dataset(out.target, out.src.constellation, 50, data_rng);
    out.test = experiment::to_target_data(channels::generate_dataset(out.target, out.src.constellation, 2000, data_rng));
    return out;
  }();
  return s;
}

double ser_of(const autoenc::Decoder& dec, const adapt::TargetData& test) {
  return autoenc::evaluate_ser(autoenc::as_classifier(dec), test.x, test.labels, 4).ser;
}

}  // namespace

TEST(Finetune, ZeroEverythingLeavesSystemUnchanged) {
  const auto& s = small_source();
  Rng rng(3);
  const auto subset = experiment::to_target_data(channels::stratified_subsample(s.train, 4, 10, rng));
  config::FinetuneConfig ft;
  ft.epochs = 0;
  ft.decoder_epochs = 0;
  const auto tuned = experiment::run_baseline_finetune(s.src.system, s.src.constellation, subset,
                                                       experiment::FinetuneVariant::all, ft, rng);
  EXPECT_TRUE(same_nets(tuned.mdn.trunk(), s.src.system.mdn.trunk()));
  EXPECT_TRUE(same_nets(tuned.decoder.net(), s.src.system.decoder.net()));
  EXPECT_EQ(ser_of(tuned.decoder, s.test), ser_of(s.src.system.decoder, s.test));
}

TEST(Finetune, ZeroEpochsMatchesNoAdaptWithinBinomialSpread) {
  const auto& s = small_source();
  Rng rng(4);
  const auto subset = experiment::to_target_data(channels::stratified_subsample(s.train, 4, 10, rng));
  config::FinetuneConfig ft;
  ft.epochs = 0;
  const auto tuned = experiment::run_baseline_finetune(s.src.system, s.src.constellation, subset,
                                                       experiment::FinetuneVariant::all, ft, rng);
  EXPECT_TRUE(same_nets(tuned.mdn.trunk(), s.src.system.mdn.trunk()));
  const double p = ser_of(s.src.system.decoder, s.test);
  const double q = ser_of(tuned.decoder, s.test);
  const double n = static_cast<double>(s.test.size());
  const double sigma = std::sqrt(2.0 * std::max(p, 1.0 / n) * (1.0 - p) / n);
  EXPECT_GT(p, 0.005);
  EXPECT_LE(std::abs(q - p), 3.0 * sigma) << "no-adapt " << p << " zero-epoch finetune " << q;
}

TEST(Finetune, LastLayerKeepsTrunkBitIdentical) {
  const auto& s = small_source();
  Rng rng(5);
  const auto subset = experiment::to_target_data(channels::stratified_subsample(s.train, 4, 20, rng));
  config::FinetuneConfig ft;
  ft.epochs = 20;
  ft.decoder_epochs = 0;
  const auto tuned = experiment::run_baseline_finetune(s.src.system, s.src.constellation, subset,
                                                       experiment::FinetuneVariant::last_layer, ft, rng);
  EXPECT_TRUE(same_nets(tuned.mdn.trunk(), s.src.system.mdn.trunk()));
  EXPECT_NE(tuned.mdn.means_head().weights, s.src.system.mdn.means_head().weights);

  const auto full = experiment::run_baseline_finetune(s.src.system, s.src.constellation, subset,
                                                      experiment::FinetuneVariant::all, ft, rng);
  EXPECT_FALSE(same_nets(full.mdn.trunk(), s.src.system.mdn.trunk()));
}

TEST(Finetune, RaisesTargetLikelihood) {
  const auto& s = small_source();
  Rng rng(6);
  const auto subset = experiment::to_target_data(channels::stratified_subsample(s.train, 4, 50, rng));
  config::FinetuneConfig ft;
  ft.decoder_epochs = 0;
  const auto tuned = experiment::run_baseline_finetune(s.src.system, s.src.constellation, subset,
                                                       experiment::FinetuneVariant::all, ft, rng);
  const double before = experiment::mean_cll(s.src.mixture, s.src.constellation, subset);
  const double after = experiment::mean_cll(mdn::predict_mixture(tuned.mdn, s.src.constellation), s.src.constellation, subset);
  EXPECT_GT(after, before);
}

TEST(Finetune, RejectsEmptyData) {
  const auto& s = small_source();
  Rng rng(7);
  adapt::TargetData empty{Matrix(2, 0), {}};
  EXPECT_THROW(experiment::run_baseline_finetune(s.src.system, s.src.constellation, empty,
                                                 experiment::FinetuneVariant::all, config::FinetuneConfig{}, rng),
               Error);
}

// ---------------------------------------------------------------------------
// End-to-end experiment

namespace {

const experiment::ResultTable& tiny_run() {
  static const experiment::ResultTable t = experiment::run_experiment(tiny_config());
  return t;
}

}  // namespace

TEST(Experiment, TinyRunProducesEveryCell) {
  const auto& t = tiny_run();
  const auto cfg = tiny_config();
  EXPECT_TRUE(t.failures.empty());
  ASSERT_EQ(t.records.size(), static_cast<std::size_t>(cfg.trials * 5 * 2));
  for (const auto& r : t.records) {
    EXPECT_GE(r.ser, 0.0);
    EXPECT_LE(r.ser, 1.0);
    EXPECT_GE(r.wall_ms, 0.0);
  }
  for (const auto& r : t.records) {
    if (r.method != "proposed") continue;
    EXPECT_TRUE(r.diagnostics.contains("lambda_star"));
    EXPECT_TRUE(r.diagnostics.contains("test_cll"));
  }
}

TEST(Experiment, RerunIsDeterministicExceptWallTime) {
  const auto& a = tiny_run();
  const auto b = experiment::run_experiment(tiny_config());
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].method, b.records[i].method);
    EXPECT_EQ(a.records[i].n_per_class, b.records[i].n_per_class);
    EXPECT_EQ(a.records[i].trial, b.records[i].trial);
    EXPECT_EQ(a.records[i].seed, b.records[i].seed);
    EXPECT_EQ(a.records[i].ser, b.records[i].ser);
    auto da = a.records[i].diagnostics, db = b.records[i].diagnostics;
    EXPECT_EQ(da, db);
  }
}

TEST(Experiment, WorkersDoNotChangeResults) {
  auto cfg = tiny_config();
  cfg.workers = 2;
  const auto b = experiment::run_experiment(cfg);
  const auto& a = tiny_run();
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].method, b.records[i].method);
    EXPECT_EQ(a.records[i].trial, b.records[i].trial);
    EXPECT_EQ(a.records[i].n_per_class, b.records[i].n_per_class);
    EXPECT_EQ(a.records[i].ser, b.records[i].ser);
  }
}

TEST(Experiment, SizeIndependentMethodsAreConstantAcrossSizes) {
  for (const char* method : {"no_adapt", "retrain_oracle"}) {
    std::map<int, std::set<double>> by_trial;
    for (const auto& r : tiny_run().records)
      if (r.method == method) by_trial[r.trial].insert(r.ser);
    ASSERT_FALSE(by_trial.empty()) << method;
    for (const auto& [trial, sers] : by_trial) EXPECT_EQ(sers.size(), 1u) << method << " trial " << trial;
  }
}

TEST(Experiment, StreamFileHoldsEveryRecord) {
  const auto dir = scratch_dir("stream");
  const auto t = experiment::run_experiment(tiny_config(), dir / "partial.jsonl");
  const auto text = io::read_text(dir / "partial.jsonl");
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), t.records.size());
}

TEST(Experiment, FailingTrialsAreRecordedNotFatal) {
  auto cfg = tiny_config();
  cfg.source_checkpoint = (kData / "does_not_exist.json").string();
  const auto t = experiment::run_experiment(cfg);
  EXPECT_TRUE(t.records.empty());
  ASSERT_EQ(t.failures.size(), static_cast<std::size_t>(cfg.trials));
  EXPECT_EQ(t.failures[0].trial, 0);
  EXPECT_FALSE(t.failures[0].message.empty());
}

TEST(Experiment, CheckpointSourceMatchesTrainedSource) {
  auto cfg = tiny_config();
  cfg.trials = 1;
  const auto src = experiment::prepare_source(cfg, 0);
  const auto dir = scratch_dir("source_ckpt");
  io::write_json(dir / "system.json", io::to_json(src.system, io::ModelCard{}));
  cfg.source_checkpoint = (dir / "system.json").string();
  const auto loaded = experiment::prepare_source(cfg, 0);
  EXPECT_EQ(io::to_json(loaded.mixture), io::to_json(src.mixture));
  const auto a = experiment::run_trial_with_source(cfg, 0, src);
  const auto b = experiment::run_trial_with_source(cfg, 0, loaded);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].method != "retrain_oracle") {
      EXPECT_EQ(a[i].ser, b[i].ser) << a[i].method;
    }
  }
}
