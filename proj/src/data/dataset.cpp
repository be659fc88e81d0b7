#include "mixflow/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/common/json_io.hpp"

namespace mixflow::data {

std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  throw ValidationError("unknown split '" + name + "' (expected train|val)");
}

std::vector<const Population*> Dataset::of_split(Split s) const {
  std::vector<const Population*> out;
  for (const auto& p : populations)
    if (p.split == s) out.push_back(&p);
  return out;
}

const Population& Dataset::find(const std::string& condition_id) const {
  for (const auto& p : populations)
    if (p.condition_id == condition_id) return p;
  throw ValidationError("unknown condition '" + condition_id + "'");
}

void Dataset::validate() const {
  for (const auto& p : populations) {
    if (p.samples.rows() < 1)
      throw ValidationError("condition '" + p.condition_id + "' has no samples");
    if (p.samples.cols() != dim)
      throw ShapeError("condition '" + p.condition_id + "' has dimension " +
                       std::to_string(p.samples.cols()) + ", dataset has " + std::to_string(dim));
    if (p.descriptor.size() != descriptor_size)
      throw ShapeError("condition '" + p.condition_id + "' has descriptor length " +
                       std::to_string(p.descriptor.size()) + ", dataset has " +
                       std::to_string(descriptor_size));
  }
}

// ---- glyphs -----------------------------------------------------------------

const std::string& builtin_letters() {
  static const std::string letters = "AEHILSTX";
  return letters;
}

GlyphSpec glyph(char letter, int resolution) {
  GlyphSpec g;
  g.letter = letter;
  g.resolution = resolution;
  switch (letter) {
    case 'A':
      g.strokes = {{-0.5, -0.8, 0.0, 0.8}, {0.0, 0.8, 0.5, -0.8}, {-0.27, -0.05, 0.27, -0.05}};
      break;
    case 'E':
      g.strokes = {{-0.45, -0.8, -0.45, 0.8},
                   {-0.45, 0.8, 0.45, 0.8},
                   {-0.45, 0.0, 0.3, 0.0},
                   {-0.45, -0.8, 0.45, -0.8}};
      break;
    case 'H':
      g.strokes = {{-0.45, -0.8, -0.45, 0.8}, {0.45, -0.8, 0.45, 0.8}, {-0.45, 0.0, 0.45, 0.0}};
      break;
    case 'I':
      g.strokes = {{0.0, -0.8, 0.0, 0.8}};
      break;
    case 'L':
      g.strokes = {{-0.4, -0.8, -0.4, 0.8}, {-0.4, -0.8, 0.45, -0.8}};
      break;
    case 'S':
      g.strokes = {{0.45, 0.65, 0.3, 0.8},   {0.3, 0.8, -0.3, 0.8},    {-0.3, 0.8, -0.45, 0.65},
                   {-0.45, 0.65, -0.45, 0.15}, {-0.45, 0.15, -0.3, 0.0}, {-0.3, 0.0, 0.3, 0.0},
                   {0.3, 0.0, 0.45, -0.15},  {0.45, -0.15, 0.45, -0.65}, {0.45, -0.65, 0.3, -0.8},
                   {0.3, -0.8, -0.3, -0.8},  {-0.3, -0.8, -0.45, -0.65}};
      break;
    case 'T':
      g.strokes = {{-0.5, 0.8, 0.5, 0.8}, {0.0, 0.8, 0.0, -0.8}};
      break;
    case 'X':
      g.strokes = {{-0.5, -0.8, 0.5, 0.8}, {-0.5, 0.8, 0.5, -0.8}};
      break;
    default:
      throw ValidationError(std::string("no built-in glyph for letter '") + letter +
                            "' (available: " + builtin_letters() + ")");
  }
  return g;
}

namespace {

double segment_distance(double px, double py, const Stroke& s) {
  const double dx = s[2] - s[0], dy = s[3] - s[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s[0]) * dx + (py - s[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s[0] + t * dx), py - (s[1] + t * dy));
}

double normalized_angle(double rotation) {
  if (!std::isfinite(rotation)) throw ValidationError("rotation must be finite");
  double a = std::fmod(rotation, 2.0 * std::numbers::pi);
  if (a < 0.0) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace

Matrix foreground_pixels(const GlyphSpec& g, double rotation) {
  if (g.resolution < 4) throw ValidationError("glyph resolution must be >= 4");
  const double a = normalized_angle(rotation);
  const double c = std::cos(a), s = std::sin(a);
  const double pix = 2.0 * kRasterExtent / g.resolution;
  std::vector<std::pair<double, double>> on;
  for (int r = 0; r < g.resolution; ++r)
    for (int col = 0; col < g.resolution; ++col) {
      const double x = -kRasterExtent + (col + 0.5) * pix;
      const double y = -kRasterExtent + (r + 0.5) * pix;
      // inverse-rotate the pixel center into glyph coordinates
      const double gx = c * x + s * y, gy = -s * x + c * y;
      double best = std::numeric_limits<double>::infinity();
      for (const Stroke& st : g.strokes) best = std::min(best, segment_distance(gx, gy, st));
      if (best <= 0.5 * g.thickness) on.emplace_back(x, y);
    }
  Matrix out(static_cast<Eigen::Index>(on.size()), 2);
  for (std::size_t k = 0; k < on.size(); ++k) {
    out(static_cast<Eigen::Index>(k), 0) = on[k].first;
    out(static_cast<Eigen::Index>(k), 1) = on[k].second;
  }
  return out;
}

Matrix render_condition(const GlyphSpec& g, double rotation, Eigen::Index n, Rng& rng) {
  if (n < 1) throw ValidationError("render_condition: n_samples must be >= 1");
  const Matrix fg = foreground_pixels(g, rotation);
  if (fg.rows() == 0)
    throw ValidationError(std::string("glyph '") + g.letter + "' has an empty foreground");
  const double pix = 2.0 * kRasterExtent / g.resolution;
  std::uniform_int_distribution<Eigen::Index> pick(0, fg.rows() - 1);
  std::uniform_real_distribution<double> jitter(-0.5 * pix, 0.5 * pix);
  Matrix out(n, 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index idx = pick(rng);
    const double jx = jitter(rng);
    const double jy = jitter(rng);
    out(k, 0) = fg(idx, 0) + jx;
    out(k, 1) = fg(idx, 1) + jy;
  }
  return out;
}

std::string synthetic_condition_id(char letter, int k) {
  std::ostringstream os;
  os << letter << "_r" << std::setw(2) << std::setfill('0') << k;
  return os.str();
}

Dataset build_synthetic(const SyntheticConfig& cfg) {
  if (cfg.letters.empty()) throw ValidationError("build_synthetic: no letters given");
  if (cfg.rotations < 2 || cfg.rotations % 2 != 0)
    throw ValidationError("build_synthetic: rotations must be even and >= 2, got " +
                          std::to_string(cfg.rotations));
  if (cfg.letters.find(cfg.val_letter) == std::string::npos)
    throw ValidationError(std::string("build_synthetic: val letter '") + cfg.val_letter +
                          "' is not among the letters '" + cfg.letters + "'");
  if (cfg.copies_per_condition < 1 || cfg.samples_per_copy < 1)
    throw ValidationError("build_synthetic: copies and samples per copy must be >= 1");
  for (std::size_t a = 0; a < cfg.letters.size(); ++a)
    for (std::size_t b = a + 1; b < cfg.letters.size(); ++b)
      if (cfg.letters[a] == cfg.letters[b])
        throw ValidationError("build_synthetic: duplicate letter in '" + cfg.letters + "'");
  const int L = static_cast<int>(cfg.letters.size());
  Dataset ds;
  ds.dim = 2;
  ds.descriptor_size = L + 1;
  for (int li = 0; li < L; ++li) {
    const char letter = cfg.letters[li];
    const GlyphSpec g = glyph(letter, cfg.resolution);
    for (int k = 0; k < cfg.rotations; ++k) {
      const bool train = k % 2 == 0;
      if (!train && letter != cfg.val_letter) continue;
      Population pop;
      pop.condition_id = synthetic_condition_id(letter, k);
      pop.split = train ? Split::train : Split::val;
      pop.descriptor = Vector::Zero(L + 1);
      pop.descriptor(li) = 1.0;
      pop.descriptor(L) = static_cast<double>(k) / cfg.rotations;
      const double angle = 2.0 * std::numbers::pi * k / cfg.rotations;
      Rng rng(derive_seed(cfg.seed, {hash_string(pop.condition_id)}));
      const Eigen::Index per = cfg.samples_per_copy;
      pop.samples.resize(per * cfg.copies_per_condition, 2);
      for (int copy = 0; copy < cfg.copies_per_condition; ++copy)
        pop.samples.middleRows(copy * per, per) = render_condition(g, angle, per, rng);
      ds.populations.push_back(std::move(pop));
    }
  }
  return ds;
}

// ---- I/O ----------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void save_populations(const Dataset& ds, const std::string& data_path,
                      const std::string& manifest_path) {
  ds.validate();
  std::ofstream data(data_path);
  if (!data) throw IoError("cannot write '" + data_path + "'");
  data << "condition_id";
  for (int d = 0; d < ds.dim; ++d) data << ",f" << d;
  data << "\n";
  nlohmann::json conditions = nlohmann::json::object();
  for (const auto& p : ds.populations) {
    if (p.condition_id.find(',') != std::string::npos)
      throw ValidationError("condition id '" + p.condition_id + "' contains a comma");
    for (Eigen::Index s = 0; s < p.samples.rows(); ++s) {
      data << p.condition_id;
      for (Eigen::Index d = 0; d < p.samples.cols(); ++d) data << ',' << format_double(p.samples(s, d));
      data << "\n";
    }
    conditions[p.condition_id] = {{"descriptor", vector_json(p.descriptor)},
                                  {"split", to_string(p.split)}};
  }
  if (!data) throw IoError("failed while writing '" + data_path + "'");
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot write '" + manifest_path + "'");
  nlohmann::json order = nlohmann::json::array();
  for (const auto& p : ds.populations) order.push_back(p.condition_id);
  manifest << nlohmann::json{{"conditions", conditions}, {"order", order}, {"dim", ds.dim}}.dump(2)
           << "\n";
  if (!manifest) throw IoError("failed while writing '" + manifest_path + "'");
}

Dataset load_populations(const std::string& data_path, const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("cannot read manifest '" + manifest_path + "'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest '" + manifest_path + "' is not valid JSON: " + e.what());
  }
  if (!manifest.contains("conditions") || !manifest["conditions"].is_object())
    throw ValidationError("manifest '" + manifest_path + "' lacks a \"conditions\" object");

  std::ifstream df(data_path);
  if (!df) throw IoError("cannot read data file '" + data_path + "'");
  std::string line;
  if (!std::getline(df, line)) throw ValidationError("data file '" + data_path + "' is empty");
  const std::vector<std::string> header = split_csv(line);
  if (header.size() < 2 || header[0] != "condition_id")
    throw ValidationError("data file '" + data_path +
                          "': header must be condition_id,f0,...");
  const int D = static_cast<int>(header.size()) - 1;
  if (manifest.contains("dim") && manifest["dim"].get<int>() != D)
    throw ValidationError("manifest dim " + std::to_string(manifest["dim"].get<int>()) +
                          " disagrees with the " + std::to_string(D) + " feature columns");

  std::map<std::string, std::vector<std::vector<double>>> rows;
  std::vector<std::string> first_seen;
  long long row_no = 1;
  while (std::getline(df, line)) {
    ++row_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv(line);
    if (static_cast<int>(cells.size()) != D + 1)
      throw ValidationError("data file row " + std::to_string(row_no) + ": expected " +
                            std::to_string(D + 1) + " columns, found " +
                            std::to_string(cells.size()));
    const std::string& id = cells[0];
    if (!manifest["conditions"].contains(id))
      throw ValidationError("data file row " + std::to_string(row_no) + ": condition '" + id +
                            "' is missing from the manifest");
    std::vector<double> values(D);
    for (int d = 0; d < D; ++d) {
      try {
        std::size_t used = 0;
        values[d] = std::stod(cells[d + 1], &used);
        if (used != cells[d + 1].size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ValidationError("data file row " + std::to_string(row_no) + ": column " +
                              std::to_string(d + 1) + " is not a number ('" + cells[d + 1] + "')");
      }
    }
    if (!rows.count(id)) first_seen.push_back(id);
    rows[id].push_back(std::move(values));
  }

  std::vector<std::string> order = first_seen;
  if (manifest.contains("order")) {
    order.clear();
    for (const auto& id : manifest["order"]) order.push_back(id.get<std::string>());
  }
  Dataset ds;
  ds.dim = D;
  ds.descriptor_size = -1;
  std::string first_id;
  for (const auto& id : order) {
    auto it = rows.find(id);
    if (it == rows.end() || it->second.empty())
      throw ValidationError("condition '" + id + "' has no rows in '" + data_path + "'");
    if (!manifest["conditions"].contains(id))
      throw ValidationError("manifest order names unknown condition '" + id + "'");
    const auto& entry = manifest["conditions"][id];
    Population p;
    p.condition_id = id;
    p.descriptor = vector_from_json(entry.at("descriptor"), "descriptor of '" + id + "'");
    p.split = split_from_string(entry.value("split", "train"));
    if (ds.descriptor_size < 0) {
      ds.descriptor_size = static_cast<int>(p.descriptor.size());
      first_id = id;
    } else if (p.descriptor.size() != ds.descriptor_size) {
      throw ValidationError("descriptor length mismatch: '" + first_id + "' has " +
                            std::to_string(ds.descriptor_size) + ", '" + id + "' has " +
                            std::to_string(p.descriptor.size()));
    }
    p.samples.resize(static_cast<Eigen::Index>(it->second.size()), D);
    for (std::size_t s = 0; s < it->second.size(); ++s)
      for (int d = 0; d < D; ++d) p.samples(static_cast<Eigen::Index>(s), d) = it->second[s][d];
    ds.populations.push_back(std::move(p));
  }
  if (order.size() != rows.size())
    throw ValidationError("manifest order does not list every condition in the data file");
  if (ds.populations.empty()) throw ValidationError("data file '" + data_path + "' has no rows");
  ds.validate();
  return ds;
}

// ---- transforms -----------------------------------------------------------------

std::uint64_t fitting_hash(const std::vector<const Population*>& pops) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (const Population* p : pops)
    h = mix_seed(h ^ hash_string(p->condition_id) ^ static_cast<std::uint64_t>(p->samples.rows()));
  return h;
}

std::pair<Dataset, PcaProjection> pca_reduce(const Dataset& ds, int n_components) {
  ds.validate();
  const auto train = ds.of_split(Split::train);
  if (train.empty()) throw ValidationError("pca_reduce: dataset has no train split");
  Eigen::Index total = 0;
  for (const Population* p : train) total += p->samples.rows();
  if (n_components < 1 || n_components > ds.dim || n_components > total)
    throw ValidationError("pca_reduce: n_components must be in [1, min(D, train samples)]");
  Matrix x(total, ds.dim);
  Eigen::Index row = 0;
  for (const Population* p : train) {
    x.middleRows(row, p->samples.rows()) = p->samples;
    row += p->samples.rows();
  }
  PcaProjection proj;
  proj.mean = x.colwise().mean().transpose();
  x.rowwise() -= proj.mean.transpose();
  Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  if (sv.size() < n_components || sv(0) <= 0.0 || sv(n_components - 1) <= 1e-10 * sv(0))
    throw ValidationError("pca_reduce: training data has rank below " +
                          std::to_string(n_components));
  proj.components = svd.matrixV().leftCols(n_components);
  const Vector var = sv.array().square();
  proj.explained_variance_ratio = var.head(n_components) / var.sum();
  proj.total_explained = proj.explained_variance_ratio.sum();
  proj.fit_hash = fitting_hash(train);
  Dataset out = ds;
  out.dim = n_components;
  for (auto& p : out.populations)
    p.samples = (p.samples.rowwise() - proj.mean.transpose()) * proj.components;
  return {out, proj};
}

Matrix pca_inverse(const PcaProjection& proj, const Matrix& z) {
  if (z.cols() != proj.components.cols())
    throw ShapeError("pca_inverse: expected " + std::to_string(proj.components.cols()) +
                     " columns");
  return (z * proj.components.transpose()).rowwise() + proj.mean.transpose();
}

std::pair<Dataset, Matrix> embed_orthogonal(const Dataset& ds, int target_dim, Rng& rng) {
  if (target_dim < ds.dim)
    throw ValidationError("embed_orthogonal: target dimension below the data dimension");
  Matrix g = standard_normal(target_dim, ds.dim, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(target_dim, ds.dim);
  Dataset out = ds;
  out.dim = target_dim;
  for (auto& p : out.populations) p.samples = p.samples * q.transpose();
  return {out, q};
}

}  // namespace mixflow::data
