#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "commands.hpp"
#include "mixflow/common/error.hpp"
#include "mixflow/train/trainer.hpp"

namespace mixflow::cli {

namespace {

constexpr double kExtent = 1.3;
constexpr double kPanel = 300.0;
constexpr double kLabelBand = 24.0;

struct Points {
  std::vector<std::pair<double, double>> xy;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> number(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

// Coordinate columns: x*/f* names from a header, otherwise every numeric
// column. A "t" column selects one snapshot when `t` is given.
Points read_points(const std::string& path, std::optional<double> t) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open points file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("points file '" + path + "' is empty");
  std::vector<std::string> first = split_csv(line);
  std::vector<int> coords;
  int t_col = -1;
  bool header = false;
  for (const auto& c : first)
    if (!number(c)) header = true;
  if (header) {
    for (std::size_t k = 0; k < first.size(); ++k) {
      const std::string& name = first[k];
      if (name == "t") t_col = static_cast<int>(k);
      else if (!name.empty() && (name[0] == 'x' || name[0] == 'f') && number(name.substr(1)))
        coords.push_back(static_cast<int>(k));
    }
  } else {
    for (std::size_t k = 0; k < first.size(); ++k) coords.push_back(static_cast<int>(k));
  }
  if (coords.size() != 2)
    throw ValidationError("points file '" + path + "' has " + std::to_string(coords.size()) +
                          " coordinate columns; plot needs 2-D data, project with pca_reduce first");
  if (t && t_col < 0) throw ValidationError("--t given but '" + path + "' has no t column");

  Points pts;
  auto take = [&](const std::vector<std::string>& row, std::size_t lineno) {
    auto cell = [&](int k) -> double {
      if (k >= static_cast<int>(row.size()))
        throw ValidationError(path + ":" + std::to_string(lineno) + ": too few columns");
      const auto v = number(row[k]);
      if (!v) throw ValidationError(path + ":" + std::to_string(lineno) + ": '" + row[k] + "' is not a number");
      return *v;
    };
    if (t && std::abs(cell(t_col) - *t) > 1e-12) return;
    pts.xy.emplace_back(cell(coords[0]), cell(coords[1]));
  };
  std::size_t lineno = 1;
  if (!header) take(first, lineno);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    take(split_csv(line), lineno);
  }
  return pts;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void add_plot(CLI::App& app) {
  auto* cmd = app.add_subcommand("plot", "Scatter 2-D point sets into an SVG, one panel per file");
  struct Opts {
    std::vector<std::string> points, labels;
    std::string out;
    std::optional<double> t;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--points", o->points, "CSV files")->required()->take_all();
  cmd->add_option("--labels", o->labels, "Panel labels (default: file names)")->take_all();
  cmd->add_option("--t", o->t, "Keep only rows with this snapshot time");
  cmd->add_option("--out", o->out, "Output SVG")->required();
  cmd->add_option("--config", "JSON file with any of the above keys");
  cmd->callback([o]() {
    if (!o->labels.empty() && o->labels.size() != o->points.size())
      throw ValidationError("--labels has " + std::to_string(o->labels.size()) + " entries for " +
                            std::to_string(o->points.size()) + " --points files");
    std::vector<Points> panels;
    for (const auto& p : o->points) panels.push_back(read_points(p, o->t));

    const double width = kPanel * static_cast<double>(panels.size());
    const double height = kPanel + kLabelBand;
    const double radius = 0.008 * kPanel;
    std::ostringstream svg;
    svg << std::setprecision(6);
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    std::size_t dropped = 0;
    for (std::size_t k = 0; k < panels.size(); ++k) {
      const double x0 = kPanel * static_cast<double>(k);
      const std::string label =
          o->labels.empty() ? std::filesystem::path(o->points[k]).filename().string() : o->labels[k];
      svg << "<g id=\"panel" << k << "\">\n"
          << "<rect x=\"" << x0 << "\" y=\"0\" width=\"" << kPanel << "\" height=\"" << kPanel
          << "\" fill=\"white\" stroke=\"#888888\"/>\n";
      for (const auto& [x, y] : panels[k].xy) {
        if (std::abs(x) > kExtent || std::abs(y) > kExtent || !std::isfinite(x) || !std::isfinite(y)) {
          ++dropped;
          continue;
        }
        const double px = x0 + (x + kExtent) / (2.0 * kExtent) * kPanel;
        const double py = (kExtent - y) / (2.0 * kExtent) * kPanel;
        svg << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"" << radius
            << "\" fill=\"#1f5fa8\" fill-opacity=\"0.6\"/>\n";
      }
      svg << "<text x=\"" << x0 + kPanel / 2.0 << "\" y=\"" << kPanel + 17.0
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
          << xml_escape(label) << "</text>\n</g>\n";
    }
    svg << "</svg>\n";
    train::write_text(o->out, svg.str());
    std::cout << "wrote " << panels.size() << " panel(s) to " << o->out << "\n";
    if (dropped) std::cerr << dropped << " point(s) outside [-1.3, 1.3]^2 were not drawn\n";
  });
}

}  // namespace mixflow::cli
