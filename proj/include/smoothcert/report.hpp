#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smoothcert/certify.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/format.hpp"

namespace smoothcert {

// 0, 0.01, ..., 2.0; each point is i / 100 so grids compare exactly.
inline std::vector<double> epsilon_grid(std::size_t steps = 200, double step_den = 100.0) {
  std::vector<double> eps(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) eps[i] = static_cast<double>(i) / step_den;
  return eps;
}

inline constexpr double kTableRadii[] = {0.25, 0.5, 0.75, 1.0};

// Fraction of rows that are certified, correct, and have radius >= eps.
// Abstentions count as failures.
inline double certified_accuracy(const std::vector<CertificationResult>& rows, double eps) {
  if (rows.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& r : rows) hit += r.correct() && r.radius >= eps;
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

struct Curve {
  double sigma = 0.0;
  std::vector<double> acc;  // aligned with CurveTable::eps

  double at_zero() const { return acc.empty() ? 0.0 : acc.front(); }
};

struct CurveTable {
  std::vector<double> eps;
  std::vector<Curve> curves;  // ascending sigma
  std::optional<double> clean_acc;
  std::vector<double> envelope;
  std::vector<double> envelope_sigma;

  std::size_t index_of(double e) const {
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (eps[i] == e) return i;
    }
    throw Error("radius " + format_double(e) + " is not on the curve grid");
  }

  const Curve& curve_for(double sigma) const {
    for (const Curve& c : curves) {
      if (c.sigma == sigma) return c;
    }
    throw Error("no curve for sigma " + format_double(sigma));
  }

  // Table-3 style cell: the envelope at eps, and in brackets the eps = 0
  // accuracy of the curve that attains it.
  std::pair<double, double> envelope_cell(double e) const {
    const std::size_t i = index_of(e);
    return {envelope[i], curve_for(envelope_sigma[i]).at_zero()};
  }
};

// Max over curves at every eps; ties go to the smallest sigma.
inline void compute_envelope(CurveTable& t) {
  t.envelope.assign(t.eps.size(), 0.0);
  t.envelope_sigma.assign(t.eps.size(), 0.0);
  for (std::size_t i = 0; i < t.eps.size(); ++i) {
    bool first = true;
    for (const Curve& c : t.curves) {
      if (first || c.acc[i] > t.envelope[i]) {
        t.envelope[i] = c.acc[i];
        t.envelope_sigma[i] = c.sigma;
        first = false;
      }
    }
  }
}

inline CurveTable build_curve_table(std::map<double, std::vector<CertificationResult>> by_sigma,
                                    std::optional<double> clean_acc,
                                    std::vector<double> eps = epsilon_grid()) {
  if (by_sigma.empty()) throw Error("curve table needs at least one sigma");
  CurveTable t;
  t.eps = std::move(eps);
  t.clean_acc = clean_acc;
  for (const auto& [sigma, rows] : by_sigma) {
    Curve c;
    c.sigma = sigma;
    c.acc.reserve(t.eps.size());
    for (const double e : t.eps) c.acc.push_back(certified_accuracy(rows, e));
    t.curves.push_back(std::move(c));
  }
  compute_envelope(t);
  return t;
}

inline std::string sigma_column(double sigma) { return "sigma_" + format_double(sigma); }

// eps,sigma_<s>...,envelope,envelope_sigma
inline std::string curves_csv(const CurveTable& t) {
  std::ostringstream os;
  os << "eps";
  for (const Curve& c : t.curves) os << ',' << sigma_column(c.sigma);
  os << ",envelope,envelope_sigma\n";
  for (std::size_t i = 0; i < t.eps.size(); ++i) {
    os << format_double(t.eps[i]);
    for (const Curve& c : t.curves) os << ',' << format_double(c.acc[i]);
    os << ',' << format_double(t.envelope[i]) << ',' << format_double(t.envelope_sigma[i])
       << '\n';
  }
  return os.str();
}

inline CurveTable parse_curves_csv(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty curve table");
  const auto head = detail::split_csv_line(line);
  if (head.size() < 4 || head.front() != "eps" || head[head.size() - 2] != "envelope" ||
      head.back() != "envelope_sigma") {
    throw DataError(source + ": unexpected curve table header");
  }
  CurveTable t;
  for (std::size_t j = 1; j + 2 < head.size(); ++j) {
    if (head[j].rfind("sigma_", 0) != 0) throw DataError(source + ": bad column " + head[j]);
    t.curves.push_back({parse_double(std::string_view(head[j]).substr(6)), {}});
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != head.size()) throw DataError(source + ": ragged row");
    t.eps.push_back(parse_double(f[0]));
    for (std::size_t j = 0; j < t.curves.size(); ++j) {
      t.curves[j].acc.push_back(parse_double(f[j + 1]));
    }
    t.envelope.push_back(parse_double(f[f.size() - 2]));
    t.envelope_sigma.push_back(parse_double(f.back()));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

inline std::filesystem::path certify_csv_path(const std::filesystem::path& dir, double sigma) {
  return dir / ("certify_" + sigma_column(sigma) + ".csv");
}

struct CleanPrediction {
  std::size_t id = 0;
  int label = 0;
  int pred = 0;
};

inline std::string clean_predictions_csv(const std::vector<CleanPrediction>& rows) {
  std::ostringstream os;
  os << "id,label,pred\n";
  for (const auto& r : rows) os << r.id << ',' << r.label << ',' << r.pred << '\n';
  return os.str();
}

inline std::vector<CleanPrediction> read_clean_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::string line;
  std::getline(in, line);
  if (line != "id,label,pred") throw DataError(path.string() + ": unexpected header");
  std::vector<CleanPrediction> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw DataError(path.string() + ": expected 3 fields");
    out.push_back({detail::parse_int<std::size_t>(f[0], path.string()),
                   detail::parse_int<int>(f[1], path.string()),
                   detail::parse_int<int>(f[2], path.string())});
  }
  return out;
}

inline double clean_accuracy(const std::vector<CleanPrediction>& rows) {
  if (rows.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& r : rows) hit += r.label == r.pred;
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

// metric,value lines derived from the curve table.
inline std::string curve_summary_csv(const CurveTable& t) {
  std::ostringstream os;
  os << "metric,value\n";
  if (t.clean_acc) os << "clean_acc," << format_double(*t.clean_acc) << '\n';
  for (const Curve& c : t.curves) {
    os << "acc_at_zero_" << sigma_column(c.sigma) << ',' << format_double(c.at_zero()) << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw Error(path.string() + ": write failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Rebuilds a run's curve table from its per-input CSVs alone.
inline CurveTable load_run(const std::filesystem::path& dir) {
  std::map<double, std::vector<CertificationResult>> by_sigma;
  if (!std::filesystem::is_directory(dir)) throw Error(dir.string() + ": not a run directory");
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("certify_sigma_", 0) != 0 || entry.path().extension() != ".csv") continue;
    auto rows = read_certification_csv(entry.path().string());
    if (rows.empty()) throw DataError(entry.path().string() + ": no rows");
    by_sigma[rows.front().sigma] = std::move(rows);
  }
  if (by_sigma.empty()) throw Error(dir.string() + ": no certification CSVs");
  std::optional<double> clean;
  if (std::filesystem::exists(dir / "clean_predictions.csv")) {
    clean = clean_accuracy(read_clean_predictions(dir / "clean_predictions.csv"));
  }
  // The stored table fixes the grid; its values must match the recount.
  std::vector<double> grid = epsilon_grid();
  std::optional<CurveTable> stored;
  if (std::filesystem::exists(dir / "curves.csv")) {
    std::ifstream in(dir / "curves.csv");
    stored = parse_curves_csv(in, (dir / "curves.csv").string());
    grid = stored->eps;
  }
  CurveTable t = build_curve_table(std::move(by_sigma), clean, grid);
  if (stored) {
    bool same = stored->curves.size() == t.curves.size() && stored->envelope == t.envelope &&
                stored->envelope_sigma == t.envelope_sigma;
    for (std::size_t i = 0; same && i < t.curves.size(); ++i) {
      same = stored->curves[i].sigma == t.curves[i].sigma && stored->curves[i].acc == t.curves[i].acc;
    }
    if (!same) throw Error(dir.string() + ": curves.csv disagrees with the per-input CSVs");
  }
  return t;
}

struct RunTable {
  std::string name;
  CurveTable table;
};

inline std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

// Aligned text: one row per run with clean accuracy and "(bracket)value"
// envelope cells at the table radii, in percent.
inline std::string comparison_text(const std::vector<RunTable>& runs) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"run", "clean"};
  for (const double r : kTableRadii) head.push_back("eps=" + format_double(r));
  cells.push_back(head);
  for (const auto& run : runs) {
    std::vector<std::string> row{run.name,
                                 run.table.clean_acc ? percent(*run.table.clean_acc) : "-"};
    for (const double r : kTableRadii) {
      const auto [v, b] = run.table.envelope_cell(r);
      row.push_back("(" + percent(b) + ")" + percent(v));
    }
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) width[j] = std::max(width[j], row[j].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j == 0) {
        os << std::left << std::setw(static_cast<int>(width[j])) << row[j];
      } else {
        os << "  " << std::right << std::setw(static_cast<int>(width[j])) << row[j];
      }
    }
    os << '\n';
  }
  return os.str();
}

// run,clean_acc,eps,envelope,envelope_sigma,bracket at the table radii.
inline std::string comparison_csv(const std::vector<RunTable>& runs) {
  std::ostringstream os;
  os << "run,clean_acc,eps,envelope,envelope_sigma,bracket\n";
  for (const auto& run : runs) {
    for (const double r : kTableRadii) {
      const std::size_t i = run.table.index_of(r);
      const auto [v, b] = run.table.envelope_cell(r);
      os << run.name << ','
         << (run.table.clean_acc ? format_double(*run.table.clean_acc) : std::string()) << ','
         << format_double(r) << ',' << format_double(v) << ','
         << format_double(run.table.envelope_sigma[i]) << ',' << format_double(b) << '\n';
    }
  }
  return os.str();
}

// Long-format plot data: run,curve,eps,acc for every curve and the envelope.
inline std::string plot_csv(const std::vector<RunTable>& runs) {
  std::ostringstream os;
  os << "run,curve,eps,acc\n";
  for (const auto& run : runs) {
    const CurveTable& t = run.table;
    for (const Curve& c : t.curves) {
      for (std::size_t i = 0; i < t.eps.size(); ++i) {
        os << run.name << ',' << sigma_column(c.sigma) << ',' << format_double(t.eps[i]) << ','
           << format_double(c.acc[i]) << '\n';
      }
    }
    for (std::size_t i = 0; i < t.eps.size(); ++i) {
      os << run.name << ",envelope," << format_double(t.eps[i]) << ','
         << format_double(t.envelope[i]) << '\n';
    }
  }
  return os.str();
}

inline void check_same_grid(const std::vector<RunTable>& runs) {
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].table.eps != runs[0].table.eps) {
      throw Error("runs '" + runs[0].name + "' and '" + runs[i].name +
                  "' use different radius grids");
    }
  }
}

}  // namespace smoothcert
