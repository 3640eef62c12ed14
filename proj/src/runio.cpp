#include "fav/runio.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef FAV_CODE_VERSION
#define FAV_CODE_VERSION "dev"
#endif

namespace fav {

using ordered_json = nlohmann::ordered_json;

std::string code_version() { return FAV_CODE_VERSION; }

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spew(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out.flush()) throw std::runtime_error("short write to " + path);
}

// %.17g round-trips doubles exactly through strtod.
void append_double(std::string& s, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  s += buf;
}

std::string csv_rows(const Eigen::Ref<const Batch>& m) {
  std::string s;
  s.reserve(static_cast<size_t>(m.size()) * 24);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) s += ',';
      append_double(s, m(i, j));
    }
    s += '\n';
  }
  return s;
}

Matrix parse_csv(const std::string& path, const std::string& want_header,
                 Index cols) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != want_header)
    throw std::runtime_error(path + ": expected header '" + want_header + "'");
  std::vector<double> vals;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const char* p = line.c_str();
    for (Index j = 0; j < cols; ++j) {
      char* end = nullptr;
      vals.push_back(std::strtod(p, &end));
      if (end == p || (j + 1 < cols && *end != ','))
        throw std::runtime_error(path + ": bad row '" + line + "'");
      p = end + (j + 1 < cols ? 1 : 0);
    }
    ++rows;
  }
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      out(i, j) = vals[static_cast<size_t>(i * cols + j)];
  return out;
}

}  // namespace

void write_manifest(const std::string& dir, const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["status"] = m.status;
  j["config"] = m.config_text;
  j["seed"] = m.seed;
  j["version"] = m.version;
  j["wall_clock_sec"] = m.wall_clock_sec;
  j["artifacts"] = m.artifacts;
  j["final_metrics"] = m.final_metrics;
  j["extras"] = m.extras;
  const std::string tmp = dir + "/manifest.json.tmp";
  spew(tmp, j.dump(2) + "\n");
  std::filesystem::rename(tmp, dir + "/manifest.json");
}

RunManifest read_manifest(const std::string& dir) {
  const ordered_json j = ordered_json::parse(slurp(dir + "/manifest.json"));
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.config_text = j.at("config").get<std::string>();
  m.seed = j.at("seed").get<std::int64_t>();
  m.version = j.at("version").get<std::string>();
  m.wall_clock_sec = j.at("wall_clock_sec").get<double>();
  m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  m.final_metrics = j.at("final_metrics").get<std::string>();
  m.extras = j.at("extras").get<std::map<std::string, double>>();
  return m;
}

std::string metrics_line(const MetricsRecord& rec) {
  ordered_json j;
  j["step"] = rec.step;
  j["kl_nats"] = rec.kl_nats;
  j["mean_reward"] = rec.mean_reward;
  j["mode_masses"] =
      std::vector<double>(rec.mode_masses.data(),
                          rec.mode_masses.data() + rec.mode_masses.size());
  j["mmd"] = rec.mmd;
  j["seed"] = rec.seed;
  return j.dump();
}

MetricsRecord metrics_from_line(const std::string& line) {
  const ordered_json j = ordered_json::parse(line);
  MetricsRecord rec;
  rec.step = j.at("step").get<std::int64_t>();
  rec.kl_nats = j.at("kl_nats").get<double>();
  rec.mean_reward = j.at("mean_reward").get<double>();
  const auto masses = j.at("mode_masses").get<std::vector<double>>();
  rec.mode_masses = Eigen::Map<const Vec>(masses.data(),
                                          static_cast<Index>(masses.size()));
  rec.mmd = j.at("mmd").get<double>();
  rec.seed = j.at("seed").get<std::int64_t>();
  return rec;
}

MetricsWriter::MetricsWriter(const std::string& path)
    : path_(path),
      out_(std::make_unique<std::ofstream>(path,
                                           std::ios::binary | std::ios::trunc)) {
  if (!*out_) throw std::runtime_error("cannot write " + path);
}

MetricsWriter::~MetricsWriter() = default;

void MetricsWriter::write(const MetricsRecord& rec) {
  last_ = metrics_line(rec);
  *out_ << last_ << '\n';
  if (!out_->flush()) throw std::runtime_error("short write to " + path_);
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metrics_from_line(line));
  return out;
}

void write_samples_csv(const std::string& path,
                       const Eigen::Ref<const Batch>& x) {
  require(x.cols() == 2, "samples csv: expected 2 columns");
  spew(path, "x,y\n" + csv_rows(x));
}

Batch read_samples_csv(const std::string& path) {
  return parse_csv(path, "x,y", 2);
}

void write_velocity_csv(const std::string& path,
                        const Eigen::Ref<const Batch>& at,
                        const VelocityReport& rep) {
  require(at.cols() == 2 && at.rows() == rep.prior.rows(),
          "velocity csv: row/column mismatch");
  Matrix m(at.rows(), 8);
  m << at, rep.prior, rep.reward, rep.repulsive;
  spew(path,
       "x,y,prior_x,prior_y,reward_x,reward_y,repulsive_x,repulsive_y\n" +
           csv_rows(m));
}

VelocityDump read_velocity_csv(const std::string& path) {
  const Matrix m = parse_csv(
      path, "x,y,prior_x,prior_y,reward_x,reward_y,repulsive_x,repulsive_y",
      8);
  VelocityDump d;
  d.at = m.leftCols(2);
  d.rep.prior = m.middleCols(2, 2);
  d.rep.reward = m.middleCols(4, 2);
  d.rep.repulsive = m.middleCols(6, 2);
  d.rep.total = d.rep.prior + d.rep.reward + d.rep.repulsive;
  return d;
}

void write_bandit_csv(const std::string& path, const BanditDataset& ds) {
  Matrix m(ds.states.rows(), 4);
  m << ds.states, ds.actions;
  spew(path, "s1,s2,a1,a2\n" + csv_rows(m));
}

BanditDataset read_bandit_csv(const std::string& path) {
  const Matrix m = parse_csv(path, "s1,s2,a1,a2", 4);
  BanditDataset ds;
  ds.states = m.leftCols(2);
  ds.actions = m.rightCols(2);
  return ds;
}

// ---------------------------------------------------------------------------
// SVG rendering. Everything below draws into a fixed 600x600 canvas with a
// 20px margin and prints coordinates with %.2f, so output bytes depend only
// on the inputs.

namespace {

constexpr double kCanvas = 600.0;
constexpr double kMargin = 20.0;

struct PixelMap {
  double lo, hi;
  double px(double x) const {
    return kMargin + (x - lo) / (hi - lo) * (kCanvas - 2 * kMargin);
  }
  double py(double y) const {
    return kCanvas - kMargin - (y - lo) / (hi - lo) * (kCanvas - 2 * kMargin);
  }
};

void append_pt(std::string& s, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  s += buf;
}

void append_move(std::string& s, double x, double y) {
  s += 'M';
  append_pt(s, x);
  s += ' ';
  append_pt(s, y);
}

void append_line(std::string& s, double x, double y) {
  s += 'L';
  append_pt(s, x);
  s += ' ';
  append_pt(s, y);
}

std::string svg_open() {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" "
                  "height=\"600\" viewBox=\"0 0 600 600\">\n";
  s += "<rect width=\"600\" height=\"600\" fill=\"#ffffff\"/>\n";
  return s;
}

// Marching squares: one <path> per iso-level. Grid layout matches
// tilted_density_grid (row i = x index, col j = y index). Saddle cells are
// resolved by the cell-center average, which keeps the output orientation
// independent.
std::string contour_paths(const GridBox& box, const Matrix& density) {
  const Index res = density.rows();
  const double vmax = density.maxCoeff();
  std::string out;
  if (vmax <= 0.0 || res < 2) return out;
  const double levels[] = {0.1, 0.3, 0.5, 0.7, 0.9};
  const PixelMap pm{box.lo, box.hi};
  for (double frac : levels) {
    const double lv = frac * vmax;
    std::string d;
    for (Index i = 0; i + 1 < res; ++i) {
      for (Index j = 0; j + 1 < res; ++j) {
        const double v00 = density(i, j), v10 = density(i + 1, j);
        const double v01 = density(i, j + 1), v11 = density(i + 1, j + 1);
        int c = (v00 > lv) | ((v10 > lv) << 1) | ((v11 > lv) << 2) |
                ((v01 > lv) << 3);
        if (c == 0 || c == 15) continue;
        const double x0 = box.coord(i), x1 = box.coord(i + 1);
        const double y0 = box.coord(j), y1 = box.coord(j + 1);
        auto lerp = [lv](double a, double b, double va, double vb) {
          return a + (lv - va) / (vb - va) * (b - a);
        };
        // Crossing points on the four cell edges.
        const double bx = lerp(x0, x1, v00, v10);  // bottom: y = y0
        const double tx = lerp(x0, x1, v01, v11);  // top:    y = y1
        const double ly = lerp(y0, y1, v00, v01);  // left:   x = x0
        const double ry = lerp(y0, y1, v10, v11);  // right:  x = x1
        auto seg = [&](double ax, double ay, double bx2, double by2) {
          append_move(d, pm.px(ax), pm.py(ay));
          append_line(d, pm.px(bx2), pm.py(by2));
        };
        switch (c) {
          case 1: case 14: seg(x0, ly, bx, y0); break;
          case 2: case 13: seg(bx, y0, x1, ry); break;
          case 3: case 12: seg(x0, ly, x1, ry); break;
          case 4: case 11: seg(tx, y1, x1, ry); break;
          case 6: case 9:  seg(bx, y0, tx, y1); break;
          case 7: case 8:  seg(x0, ly, tx, y1); break;
          case 5: case 10: {
            const bool center_high = 0.25 * (v00 + v10 + v01 + v11) > lv;
            if ((c == 5) == center_high) {
              seg(x0, ly, tx, y1);
              seg(bx, y0, x1, ry);
            } else {
              seg(x0, ly, bx, y0);
              seg(tx, y1, x1, ry);
            }
            break;
          }
        }
      }
    }
    if (!d.empty())
      out += "<path d=\"" + d +
             "\" fill=\"none\" stroke=\"#9aa7b8\" stroke-width=\"1\"/>\n";
  }
  return out;
}

}  // namespace

std::string svg_scatter(const GridBox& box, const Matrix& density,
                        const Eigen::Ref<const Batch>& samples) {
  require(density.rows() == density.cols(), "svg: density grid must be square");
  std::string s = svg_open();
  s += contour_paths(box, density);
  const PixelMap pm{box.lo, box.hi};
  for (Index i = 0; i < samples.rows(); ++i) {
    s += "<circle cx=\"";
    append_pt(s, pm.px(samples(i, 0)));
    s += "\" cy=\"";
    append_pt(s, pm.py(samples(i, 1)));
    s += "\" r=\"2\" fill=\"#2b6cb0\" fill-opacity=\"0.55\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string svg_quiver(const GridBox& box, const Eigen::Ref<const Batch>& at,
                       const VelocityReport& rep) {
  require(at.rows() == rep.prior.rows() && at.cols() == 2,
          "svg: quiver row/column mismatch");
  std::string s = svg_open();
  const PixelMap pm{box.lo, box.hi};
  // One shared scale across components: largest arrow = 30px on canvas.
  double vmax = 0.0;
  const Batch* comps[] = {&rep.prior, &rep.reward, &rep.repulsive};
  for (const Batch* c : comps)
    if (c->size()) vmax = std::max(vmax, c->rowwise().norm().maxCoeff());
  const double scale = vmax > 0.0 ? 30.0 / vmax : 0.0;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c"};
  for (int k = 0; k < 3; ++k) {
    std::string d;
    for (Index i = 0; i < at.rows(); ++i) {
      const double x = pm.px(at(i, 0)), y = pm.py(at(i, 1));
      // SVG y grows downward, hence the sign flip on the y component.
      const double dx = (*comps[k])(i, 0) * scale;
      const double dy = -(*comps[k])(i, 1) * scale;
      const double len = std::hypot(dx, dy);
      if (len < 0.5) continue;
      const double tx = x + dx, ty = y + dy;
      append_move(d, x, y);
      append_line(d, tx, ty);
      // Two-stroke arrowhead, 25% of the shaft, +-150 degrees off it.
      const double hx = -dx / len, hy = -dy / len;
      const double hl = 0.25 * len;
      const double c30 = 0.8660254037844386, s30 = 0.5;
      append_move(d, tx + hl * (hx * c30 - hy * s30),
                  ty + hl * (hx * s30 + hy * c30));
      append_line(d, tx, ty);
      append_line(d, tx + hl * (hx * c30 + hy * s30),
                  ty + hl * (-hx * s30 + hy * c30));
    }
    if (!d.empty()) {
      s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"";
      s += colors[k];
      s += "\" stroke-width=\"1\"/>\n";
    }
  }
  s += "</svg>\n";
  return s;
}

}  // namespace fav
