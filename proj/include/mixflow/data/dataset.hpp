#pragma once

#include <array>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"

namespace mixflow::data {

enum class Split { train, val };
std::string to_string(Split s);
Split split_from_string(const std::string& name);

struct Population {
  Matrix samples;  // S x D
  Vector descriptor;
  std::string condition_id;
  Split split = Split::train;
};

struct Dataset {
  std::vector<Population> populations;
  int dim = 0;
  int descriptor_size = 0;

  std::vector<const Population*> of_split(Split s) const;
  const Population& find(const std::string& condition_id) const;
  // Throws ValidationError on empty populations or inconsistent sizes.
  void validate() const;
};

// ---- synthetic letters ------------------------------------------------------

// Segment (x0, y0, x1, y1) in glyph coordinates, roughly [-0.6, 0.6] x [-0.8, 0.8].
using Stroke = std::array<double, 4>;

struct GlyphSpec {
  char letter = 'A';
  std::vector<Stroke> strokes;
  int resolution = 48;
  double thickness = 0.18;
};

// Letters with built-in stroke definitions.
const std::string& builtin_letters();
GlyphSpec glyph(char letter, int resolution = 48);

inline constexpr double kRasterExtent = 1.2;

// Pixel centers of the rotated, rasterized glyph on the grid over
// [-1.2, 1.2]^2.
Matrix foreground_pixels(const GlyphSpec& g, double rotation);

// Uniform foreground pixel plus uniform sub-pixel jitter.
Matrix render_condition(const GlyphSpec& g, double rotation, Eigen::Index n, Rng& rng);

struct SyntheticConfig {
  std::string letters = "AEHLST";
  int rotations = 20;
  int copies_per_condition = 3;
  int samples_per_copy = 200;
  char val_letter = 'S';
  int resolution = 48;
  std::uint64_t seed = 0;
};

// Conditions letters x rotations at angles 2 pi k / R with descriptor
// one-hot(letter) ++ [k / R]. Train: even k, every letter. Val: odd k of
// val_letter. The remaining odd-k conditions are not materialized.
Dataset build_synthetic(const SyntheticConfig& cfg);
std::string synthetic_condition_id(char letter, int k);

// ---- on-disk layout -----------------------------------------------------------

// data.csv (condition_id, f0..f{D-1}) + manifest.json.
void save_populations(const Dataset& ds, const std::string& data_path,
                      const std::string& manifest_path);
Dataset load_populations(const std::string& data_path, const std::string& manifest_path);

// ---- transforms ------------------------------------------------------------

struct PcaProjection {
  Vector mean;
  Matrix components;  // D x k, orthonormal columns
  Vector explained_variance_ratio;
  double total_explained = 0.0;
  std::uint64_t fit_hash = 0;  // hash of the condition ids and sizes used for fitting
};

// Fits on train-split samples only and projects every population.
std::pair<Dataset, PcaProjection> pca_reduce(const Dataset& ds, int n_components);
Matrix pca_inverse(const PcaProjection& proj, const Matrix& z);
std::uint64_t fitting_hash(const std::vector<const Population*>& pops);

// Maps every population through a random isometry R^D -> R^target_dim.
std::pair<Dataset, Matrix> embed_orthogonal(const Dataset& ds, int target_dim, Rng& rng);

}  // namespace mixflow::data
