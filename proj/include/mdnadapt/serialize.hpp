#pragma once

// JSON schemas for every persisted object plus dataset CSV/binary I/O.
// Matrices are nested arrays of rows (row-major); doubles are JSON numbers
// written with round-trip precision.

#include "mdnadapt/adapt.hpp"
#include "mdnadapt/autoenc.hpp"
#include "mdnadapt/channels.hpp"
#include "mdnadapt/gmm.hpp"
#include "mdnadapt/mdn.hpp"
#include "mdnadapt/neural.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace mdnadapt::io {

using Json = nlohmann::json;

inline Json to_json(const Vector& v) {
  Json j = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}

inline Json to_json(const Matrix& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    j.push_back(std::move(row));
  }
  return j;
}

inline Vector vector_from_json(const Json& j) {
  require(j.is_array(), "json: expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

inline Matrix matrix_from_json(const Json& j, Eigen::Index expected_cols = -1) {
  require(j.is_array(), "json: expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : std::max<Eigen::Index>(0, expected_cols);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    require(row.is_array() && static_cast<Eigen::Index>(row.size()) == cols, "json: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

// ---- gmm -------------------------------------------------------------------

inline Json to_json(const gmm::Covariance& c) {
  if (c.is_diagonal()) return {{"type", "diagonal"}, {"variances", to_json(c.variances())}};
  return {{"type", "full"}, {"matrix", to_json(c.matrix())}};
}

inline gmm::Covariance covariance_from_json(const Json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "diagonal") return gmm::Covariance::diagonal(vector_from_json(j.at("variances")));
  if (type == "full") return gmm::Covariance::full(matrix_from_json(j.at("matrix")));
  throw Error("json: unknown covariance type '" + type + "'");
}

inline Json to_json(const gmm::GaussianComponent& c) {
  return {{"prior_logit", c.prior_logit}, {"mean", to_json(c.mean)}, {"covariance", to_json(c.cov)}};
}

inline gmm::GaussianComponent component_from_json(const Json& j) {
  gmm::GaussianComponent c;
  c.prior_logit = j.at("prior_logit").get<double>();
  c.mean = vector_from_json(j.at("mean"));
  c.cov = covariance_from_json(j.at("covariance"));
  c.validate();
  return c;
}

inline Json to_json(const gmm::ConditionalMixture& mix) {
  Json per = Json::array();
  for (const auto& comps : mix.per_symbol) {
    Json row = Json::array();
    for (const auto& c : comps) row.push_back(to_json(c));
    per.push_back(std::move(row));
  }
  return {{"m", mix.m()}, {"k", mix.k()}, {"d", mix.d()}, {"per_symbol", std::move(per)}};
}

inline gmm::ConditionalMixture mixture_from_json(const Json& j) {
  gmm::ConditionalMixture mix;
  for (const auto& row : j.at("per_symbol")) {
    gmm::Components comps;
    for (const auto& c : row) comps.push_back(component_from_json(c));
    mix.per_symbol.push_back(std::move(comps));
  }
  mix.validate();
  return mix;
}

inline Json to_json(const gmm::SymbolConstellation& c) {
  Json symbols = Json::array();
  for (const auto& s : c.symbols) symbols.push_back(to_json(s));
  return {{"symbols", std::move(symbols)}, {"priors", to_json(c.priors)}};
}

inline gmm::SymbolConstellation constellation_from_json(const Json& j) {
  gmm::SymbolConstellation c;
  for (const auto& s : j.at("symbols")) c.symbols.push_back(vector_from_json(s));
  c.priors = vector_from_json(j.at("priors"));
  c.validate();
  return c;
}

inline std::string to_string(gmm::CovarianceTransform s) { return s == gmm::CovarianceTransform::diagonal ? "diagonal" : "full"; }

inline gmm::CovarianceTransform transform_from_string(const std::string& s) {
  if (s == "diagonal") return gmm::CovarianceTransform::diagonal;
  if (s == "full") return gmm::CovarianceTransform::full;
  throw Error("json: unknown covariance transform '" + s + "'");
}

/// Carries both the flat vector (documented layout) and a per-component view;
/// the flat vector is authoritative on load.
inline Json to_json(const gmm::AdaptationParams& p) {
  Json comps = Json::array();
  for (const auto& c : p.components()) {
    comps.push_back({{"A", to_json(c.A)}, {"b", to_json(c.b)}, {"C", to_json(c.C)}, {"beta", c.beta}, {"gamma", c.gamma}});
  }
  return {{"k", p.k()}, {"d", p.d()}, {"shape", to_string(p.shape())}, {"vector", to_json(p.to_vector())},
          {"components", std::move(comps)}};
}

inline gmm::AdaptationParams params_from_json(const Json& j) {
  auto p = gmm::AdaptationParams::from_vector(vector_from_json(j.at("vector")), j.at("k").get<int>(),
                                              j.at("d").get<Eigen::Index>(), transform_from_string(j.at("shape")));
  p.validate();
  return p;
}

// ---- neural ----------------------------------------------------------------

inline Json to_json(const neural::DenseLayer& l) {
  return {{"in", l.in()},
          {"out", l.out()},
          {"activation", std::string(neural::to_string(l.activation))},
          {"weights", to_json(l.weights)},
          {"biases", to_json(l.biases)}};
}

inline neural::DenseLayer layer_from_json(const Json& j) {
  neural::DenseLayer l;
  l.weights = matrix_from_json(j.at("weights"), j.at("in").get<Eigen::Index>());
  l.biases = vector_from_json(j.at("biases"));
  l.activation = neural::activation_from_string(j.at("activation").get<std::string>());
  require(l.weights.rows() == j.at("out").get<Eigen::Index>() && l.weights.cols() == j.at("in").get<Eigen::Index>(),
          "json: layer shape does not match in/out");
  require(l.biases.size() == l.weights.rows(), "json: bias length mismatch");
  return l;
}

inline Json to_json(const neural::FeedForwardNet& net) {
  Json layers = Json::array();
  for (const auto& l : net.layers()) layers.push_back(to_json(l));
  return {{"layers", std::move(layers)}};
}

inline neural::FeedForwardNet net_from_json(const Json& j) {
  std::vector<neural::DenseLayer> layers;
  for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
  return neural::FeedForwardNet(std::move(layers));
}

// ---- mdn / autoencoder -------------------------------------------------------

inline Json to_json(const mdn::MdnModel& model) {
  return {{"k", model.k()},
          {"d", model.d()},
          {"hidden", model.hidden()},
          {"trunk", to_json(model.trunk())},
          {"means", to_json(model.means_head())},
          {"variances", to_json(model.variances_head())},
          {"logits", to_json(model.logits_head())}};
}

inline mdn::MdnModel mdn_from_json(const Json& j) {
  return mdn::MdnModel::from_parts(net_from_json(j.at("trunk")), layer_from_json(j.at("means")),
                                   layer_from_json(j.at("variances")), layer_from_json(j.at("logits")));
}

struct ModelCard {
  int k = 0;
  int d = 0;
  int hidden = 0;
  std::uint64_t seed = 0;
  int n_ae = 0;
  int n_ce = 0;
  int mdn_samples = 0;
  int ae_samples = 0;
  std::string channel;
};

inline Json to_json(const ModelCard& c) {
  return {{"k", c.k},         {"d", c.d},
          {"n_h", c.hidden},  {"seed", c.seed},
          {"n_ae", c.n_ae},   {"n_ce", c.n_ce},
          {"mdn_samples", c.mdn_samples}, {"ae_samples", c.ae_samples},
          {"channel", c.channel}};
}

inline ModelCard card_from_json(const Json& j) {
  ModelCard c;
  c.k = j.value("k", 0);
  c.d = j.value("d", 0);
  c.hidden = j.value("n_h", 0);
  c.seed = j.value("seed", std::uint64_t{0});
  c.n_ae = j.value("n_ae", 0);
  c.n_ce = j.value("n_ce", 0);
  c.mdn_samples = j.value("mdn_samples", 0);
  c.ae_samples = j.value("ae_samples", 0);
  c.channel = j.value("channel", std::string{});
  return c;
}

inline constexpr const char* kSystemFormat = "mdnadapt.system/1";

inline Json to_json(const autoenc::AutoencoderSystem& s, const ModelCard& card) {
  return {{"format", kSystemFormat},
          {"m", s.m()},
          {"d", s.d()},
          {"card", to_json(card)},
          {"encoder", {{"power", s.encoder.power()}, {"net", to_json(s.encoder.net())}}},
          {"mdn", to_json(s.mdn)},
          {"decoder", {{"net", to_json(s.decoder.net())}}},
          {"constellation", to_json(s.constellation())}};
}

inline autoenc::AutoencoderSystem system_from_json(const Json& j) {
  require(j.value("format", std::string{}) == kSystemFormat, "json: not a system checkpoint");
  autoenc::AutoencoderSystem s;
  s.encoder = autoenc::Encoder(net_from_json(j.at("encoder").at("net")), j.at("encoder").at("power").get<double>());
  s.mdn = mdn_from_json(j.at("mdn"));
  s.decoder = autoenc::Decoder(net_from_json(j.at("decoder").at("net")));
  s.validate();
  return s;
}

// ---- channels ----------------------------------------------------------------

inline Json to_json(const channels::ChannelSpec& spec) {
  Json j = {{"kind", spec.kind()},
            {"phase_max", spec.phase_max},
            {"iq_imbalance", spec.iq_imbalance},
            {"rate", spec.rate},
            {"p_avg", spec.p_avg}};
  std::visit(
      [&](const auto& b) {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, channels::Awgn>) {
          j["sigma0"] = b.sigma0;
        } else if constexpr (std::is_same_v<T, channels::UniformFading>) {
          j["a"] = b.a;
          j["sigma0"] = b.sigma0;
        } else if constexpr (std::is_same_v<T, channels::Ricean>) {
          j["nu"] = b.nu;
          j["sigma_a"] = b.sigma_a;
          j["sigma0"] = b.sigma0;
        } else {
          j["seed"] = b.seed;
          j["reference"] = to_json(b.reference);
          j["mixture"] = to_json(b.mixture);
        }
      },
      spec.base);
  return j;
}

inline channels::ChannelSpec channel_from_json(const Json& j) {
  channels::ChannelSpec spec;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "awgn") {
    spec.base = channels::Awgn{j.at("sigma0").get<double>()};
  } else if (kind == "uniform_fading") {
    spec.base = channels::UniformFading{j.at("a").get<double>(), j.at("sigma0").get<double>()};
  } else if (kind == "ricean") {
    spec.base = channels::Ricean{j.at("nu").get<double>(), j.at("sigma_a").get<double>(), j.at("sigma0").get<double>()};
  } else if (kind == "random_gmm") {
    spec.base = channels::RandomGmm{constellation_from_json(j.at("reference")), mixture_from_json(j.at("mixture")),
                                    j.value("seed", std::uint64_t{0})};
  } else {
    throw Error("json: unknown channel kind '" + kind + "'");
  }
  spec.phase_max = j.value("phase_max", 0.0);
  spec.iq_imbalance = j.value("iq_imbalance", 0.0);
  spec.rate = j.value("rate", 2.0);
  spec.p_avg = j.value("p_avg", 1.0);
  spec.validate();
  return spec;
}

// ---- adaptation / evaluation -----------------------------------------------------

inline Json to_json(const adapt::AdaptationResult& r) {
  Json records = Json::array();
  for (const auto& rec : r.records) {
    records.push_back({{"lambda", rec.lambda},
                       {"objective", rec.failed ? Json(nullptr) : Json(rec.objective)},
                       {"kl", rec.kl},
                       {"metric", rec.failed ? Json(nullptr) : Json(rec.metric)},
                       {"iterations", rec.iterations},
                       {"converged", rec.converged},
                       {"failed", rec.failed},
                       {"message", rec.message}});
  }
  return {{"mode", adapt::to_string(r.mode)},
          {"lambda_star", r.lambda_star},
          {"best_index", r.best_index},
          {"psi", to_json(r.psi_star)},
          {"records", std::move(records)},
          {"target", to_json(r.target)}};
}

inline Json to_json(const autoenc::SerReport& r, std::uint64_t seed) {
  return {{"seed", seed}, {"n_test", r.n}, {"ser", r.ser}, {"errors", r.errors}, {"confusion", r.confusion}};
}

// ---- files ---------------------------------------------------------------------

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path.string() + "' for writing");
  out << text;
  require(static_cast<bool>(out), "write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw Error("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

// ---- datasets --------------------------------------------------------------------

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

/// Columns x0..x{d-1}, y, z0..z{d-1}.
inline std::string dataset_to_csv(const channels::Dataset& data) {
  require(!data.empty(), "dataset csv: empty dataset");
  const auto d = data.front().x.size();
  std::ostringstream ss;
  for (Eigen::Index j = 0; j < d; ++j) ss << "x" << j << ",";
  ss << "y";
  for (Eigen::Index j = 0; j < d; ++j) ss << ",z" << j;
  ss << "\n";
  for (const auto& s : data) {
    for (Eigen::Index j = 0; j < d; ++j) ss << format_double(s.x[j]) << ",";
    ss << s.y;
    for (Eigen::Index j = 0; j < d; ++j) ss << "," << format_double(s.z[j]);
    ss << "\n";
  }
  return ss.str();
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline channels::Dataset dataset_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "dataset csv: missing header");
  const auto header = split(line, ',');
  require(header.size() >= 3 && header.size() % 2 == 1, "dataset csv: malformed header");
  const auto d = static_cast<Eigen::Index>((header.size() - 1) / 2);
  channels::Dataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    require(cells.size() == header.size(), "dataset csv: wrong number of columns");
    channels::LabeledSample s{Vector(d), 0, Vector(d)};
    for (Eigen::Index j = 0; j < d; ++j) s.x[j] = std::stod(cells[static_cast<std::size_t>(j)]);
    s.y = std::stoi(cells[static_cast<std::size_t>(d)]);
    for (Eigen::Index j = 0; j < d; ++j) s.z[j] = std::stod(cells[static_cast<std::size_t>(d + 1 + j)]);
    data.push_back(std::move(s));
  }
  return data;
}

/// Little-endian f64 rows [x..., y, z...] plus a JSON sidecar at path + ".json".
inline void write_dataset_binary(const std::filesystem::path& path, const channels::Dataset& data, const Json& spec,
                                 std::uint64_t seed) {
  require(!data.empty(), "dataset binary: empty dataset");
  const auto d = data.front().x.size();
  std::string bytes;
  bytes.reserve(data.size() * static_cast<std::size_t>(2 * d + 1) * 8);
  auto put = [&](double v) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
  };
  for (const auto& s : data) {
    for (Eigen::Index j = 0; j < d; ++j) put(s.x[j]);
    put(static_cast<double>(s.y));
    for (Eigen::Index j = 0; j < d; ++j) put(s.z[j]);
  }
  write_text(path, bytes);
  Json columns = Json::array();
  for (Eigen::Index j = 0; j < d; ++j) columns.push_back("x" + std::to_string(j));
  columns.push_back("y");
  for (Eigen::Index j = 0; j < d; ++j) columns.push_back("z" + std::to_string(j));
  write_json(path.string() + ".json", {{"format", "f64le-rows"},
                                       {"rows", data.size()},
                                       {"d", d},
                                       {"columns", columns},
                                       {"seed", seed},
                                       {"spec", spec}});
}

inline channels::Dataset read_dataset_binary(const std::filesystem::path& path) {
  const Json meta = read_json(path.string() + ".json");
  const auto d = meta.at("d").get<Eigen::Index>();
  const auto rows = meta.at("rows").get<std::size_t>();
  const std::string bytes = read_text(path);
  const auto width = static_cast<std::size_t>(2 * d + 1);
  require(bytes.size() == rows * width * 8, "dataset binary: size does not match sidecar");
  std::size_t off = 0;
  auto get = [&]() {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(b)])) << (8 * b);
    off += 8;
    return std::bit_cast<double>(u);
  };
  channels::Dataset data;
  data.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    channels::LabeledSample s{Vector(d), 0, Vector(d)};
    for (Eigen::Index j = 0; j < d; ++j) s.x[j] = get();
    s.y = static_cast<int>(get());
    for (Eigen::Index j = 0; j < d; ++j) s.z[j] = get();
    data.push_back(std::move(s));
  }
  return data;
}

}  // namespace mdnadapt::io
