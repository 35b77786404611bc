#include "mdnadapt/experiment.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace mdnadapt;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kPartialFailure = 2;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> trials;
  bool full_scale = false;
  std::string methods;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "experiment config (.toml or .json)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "base seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--trials", o.trials, "number of trials");
  cmd->add_flag("--full-scale", o.full_scale, "300,000-sample target splits");
  cmd->add_option("--methods", o.methods, "comma-separated methods");
}

config::ExperimentConfig resolve(const CommonOptions& o) {
  auto cfg = o.config_path.empty() ? config::ExperimentConfig{} : config::load(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.trials) cfg.trials = *o.trials;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.full_scale) cfg.apply_full_scale();
  if (!o.methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : io::split(o.methods, ',')) cfg.methods.push_back(config::method_from_string(m));
  }
  cfg.validate();
  return cfg;
}

channels::Dataset load_dataset(const fs::path& path) {
  if (path.extension() == ".csv") return io::dataset_from_csv(io::read_text(path));
  return io::read_dataset_binary(path);
}

io::ModelCard card_for(const config::ExperimentConfig& cfg, std::uint64_t seed) {
  io::ModelCard card;
  card.k = cfg.shape.k;
  card.d = cfg.shape.d;
  card.hidden = cfg.shape.hidden;
  card.seed = seed;
  card.n_ae = cfg.training.n_ae;
  card.n_ce = cfg.training.n_ce;
  card.mdn_samples = cfg.training.mdn_samples;
  card.ae_samples = static_cast<int>(cfg.training.ae_samples);
  card.channel = cfg.source.kind;
  return card;
}

int cmd_train_source(const CommonOptions& o, int trial) {
  auto cfg = resolve(o);
  cfg.source_checkpoint.clear();
  const fs::path dir = cfg.out_dir;
  const auto src = experiment::prepare_source(cfg, trial);
  io::write_json(dir / "system.json", io::to_json(src.system, card_for(cfg, src.seed)));
  io::write_json(dir / "source_channel.json", io::to_json(src.channel));
  io::write_json(dir / "training_curve.json", {{"ce_loss", src.curve.ce_loss},
                                               {"mdn_loss", src.curve.mdn_loss},
                                               {"learning_rate", src.curve.learning_rate}});
  io::write_json(dir / "source_mixture.json", io::to_json(src.mixture));
  std::cout << "wrote " << (dir / "system.json").string() << "\n";
  return kOk;
}

int cmd_gen_data(const CommonOptions& o, const std::string& checkpoint, const std::string& domain, int n_per_class,
                 const std::string& format, int trial) {
  auto cfg = resolve(o);
  const auto seed = experiment::trial_seed(cfg, trial);
  const auto system = io::system_from_json(io::read_json(checkpoint));
  const auto constellation = system.constellation();
  Rng source_rng(experiment::derive_seed(seed, {1}));
  const auto qam_ref = cfg.shape.d == 2 ? channels::qam_constellation(cfg.shape.m) : gmm::SymbolConstellation{};
  const auto source = experiment::materialize(cfg.source, cfg.shape, qam_ref, source_rng());
  channels::ChannelSpec spec = source;
  if (domain == "target") {
    Rng target_rng(experiment::derive_seed(seed, {3}));
    spec = experiment::materialize(cfg.target, cfg.shape, constellation, target_rng(), &source);
  }
  const auto data_seed = experiment::derive_seed(seed, {9, static_cast<std::uint64_t>(n_per_class)});
  Rng rng(data_seed);
  const auto data = channels::generate_dataset(spec, constellation, n_per_class, rng);
  const fs::path dir = cfg.out_dir;
  const fs::path path = dir / (domain + (format == "csv" ? ".csv" : ".bin"));
  if (format == "csv") {
    io::write_text(path, io::dataset_to_csv(data));
  } else {
    io::write_dataset_binary(path, data, io::to_json(spec), data_seed);
  }
  io::write_json(dir / (domain + "_channel.json"), io::to_json(spec));
  std::cout << "wrote " << data.size() << " samples to " << path.string() << "\n";
  return kOk;
}

int cmd_adapt(const CommonOptions& o, const std::string& checkpoint, const std::string& data_path,
              const std::string& mode) {
  auto cfg = resolve(o);
  if (!mode.empty()) cfg.adaptation.mode = adapt::mode_from_string(mode);
  const auto system = io::system_from_json(io::read_json(checkpoint));
  const auto constellation = system.constellation();
  const auto source = mdn::predict_mixture(system.mdn, constellation);
  const auto data = experiment::to_target_data(load_dataset(data_path));
  const auto result = adapt::adapt(source, constellation, data, cfg.adaptation, &system.decoder);
  const fs::path path = fs::path(cfg.out_dir) / "adaptation.json";
  io::write_json(path, io::to_json(result));
  std::cout << "lambda* = " << result.lambda_star << ", wrote " << path.string() << "\n";
  return kOk;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& data_path,
                 const std::string& adaptation_path) {
  auto cfg = resolve(o);
  const auto system = io::system_from_json(io::read_json(checkpoint));
  const auto constellation = system.constellation();
  const auto data = experiment::to_target_data(load_dataset(data_path));
  autoenc::Classifier classify = autoenc::as_classifier(system.decoder);
  if (!adaptation_path.empty()) {
    const auto psi = io::params_from_json(io::read_json(adaptation_path).at("psi"));
    const auto source = mdn::predict_mixture(system.mdn, constellation);
    classify = adapt::as_classifier(std::make_shared<const adapt::AdaptedDecoder>(system.decoder, source, psi, constellation));
  }
  const auto rep = autoenc::evaluate_ser(classify, data.x, data.labels, system.m());
  const fs::path path = fs::path(cfg.out_dir) / "ser.json";
  io::write_json(path, io::to_json(rep, cfg.seed));
  std::cout << "SER = " << rep.ser << " (" << rep.errors << "/" << rep.n << ")\n";
  return kOk;
}

void print_aggregate(const std::vector<experiment::AggregateRow>& rows) {
  std::cout << std::left << std::setw(16) << "method" << std::right << std::setw(8) << "n/class" << std::setw(7) << "count"
            << std::setw(12) << "mean SER" << std::setw(12) << "stderr" << "\n";
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(16) << r.method << std::right << std::setw(8) << r.n_per_class << std::setw(7)
              << r.count << std::setw(12) << std::setprecision(5) << std::fixed << r.mean << std::setw(12) << r.stderr_
              << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
}

int cmd_sweep(const CommonOptions& o, const std::string& format) {
  auto cfg = resolve(o);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  io::write_json(dir / "config.json", config::to_json(cfg));
  const auto table = experiment::run_experiment(cfg, dir / "records.partial.jsonl");
  for (const auto& f : table.failures) std::cerr << "trial " << f.trial << " failed: " << f.message << "\n";
  if (table.records.empty()) {
    std::cerr << "error: every trial failed\n";
    return kPartialFailure;
  }
  experiment::emit_results(table, dir, format == "csv" ? experiment::Format::csv : experiment::Format::json_lines);
  print_aggregate(experiment::aggregate(table.records));
  return table.failures.empty() ? kOk : kPartialFailure;
}

int cmd_report(const std::string& input, const std::string& out) {
  std::vector<experiment::ResultRecord> records;
  const fs::path path = input;
  if (path.extension() == ".csv") {
    records = experiment::records_from_csv(io::read_text(path));
  } else {
    std::istringstream in(io::read_text(path));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = io::Json::parse(line);
      experiment::ResultRecord r;
      r.method = j.at("method").get<std::string>();
      r.n_per_class = j.at("n_per_class").get<int>();
      r.trial = j.at("trial").get<int>();
      r.ser = j.at("ser").get<double>();
      r.wall_ms = j.value("wall_ms", 0.0);
      records.push_back(std::move(r));
    }
  }
  const auto rows = experiment::aggregate(records);
  print_aggregate(rows);
  if (!out.empty()) io::write_text(out, experiment::aggregate_to_csv(rows));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Autoencoder communication over an MDN channel with few-shot adaptation"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* train = app.add_subcommand("train-source", "train the source autoencoder system");
  add_common(train, common);
  int trial = 0;
  train->add_option("--trial", trial, "trial index used to derive the seed");

  auto* gen = app.add_subcommand("gen-data", "sample a labeled dataset from the source or target channel");
  add_common(gen, common);
  std::string checkpoint, domain = "target", format = "csv";
  int n_per_class = 50;
  gen->add_option("--checkpoint", checkpoint, "system checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--domain", domain, "source or target")->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--n-per-class", n_per_class, "samples per class")->check(CLI::PositiveNumber);
  gen->add_option("--format", format, "csv or binary")->check(CLI::IsMember({"csv", "binary"}));
  gen->add_option("--trial", trial, "trial index used to derive the seed");

  auto* ad = app.add_subcommand("adapt", "fit adaptation parameters on a labeled target dataset");
  add_common(ad, common);
  std::string data_path, mode;
  ad->add_option("--checkpoint", checkpoint, "system checkpoint")->required()->check(CLI::ExistingFile);
  ad->add_option("--data", data_path, "target dataset (.csv or binary)")->required()->check(CLI::ExistingFile);
  ad->add_option("--mode", mode, "discriminative or generative")->check(CLI::IsMember({"discriminative", "generative"}));

  auto* ev = app.add_subcommand("evaluate", "symbol error rate of a (possibly adapted) decoder on a dataset");
  add_common(ev, common);
  std::string adaptation_path;
  ev->add_option("--checkpoint", checkpoint, "system checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "test dataset (.csv or binary)")->required()->check(CLI::ExistingFile);
  ev->add_option("--adaptation", adaptation_path, "adaptation.json from the adapt command")->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "run every enabled method across trials and sample sizes");
  add_common(sweep, common);
  std::string out_format = "csv";
  sweep->add_option("--format", out_format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));

  auto* report = app.add_subcommand("report", "aggregate a records file");
  std::string input, report_out;
  report->add_option("--in", input, "records.csv or records.jsonl")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "write aggregate csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return cmd_train_source(common, trial);
    if (*gen) return cmd_gen_data(common, checkpoint, domain, n_per_class, format, trial);
    if (*ad) return cmd_adapt(common, checkpoint, data_path, mode);
    if (*ev) return cmd_evaluate(common, checkpoint, data_path, adaptation_path);
    if (*sweep) return cmd_sweep(common, out_format);
    if (*report) return cmd_report(input, report_out);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
