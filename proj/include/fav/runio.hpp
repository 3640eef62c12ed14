#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fav/bandit.hpp"
#include "fav/metrics.hpp"
#include "fav/quadrature.hpp"
#include "fav/velocity.hpp"

namespace fav {

// Version string baked in at configure time (git description when available).
std::string code_version();

// What a run directory says about itself. Written atomically ("running") the
// moment the directory is set up, rewritten ("complete") when the command
// finishes, so a crashed run is distinguishable from a finished one.
struct RunManifest {
  std::string command;         // CLI verb that produced the run
  std::string status = "running";
  std::string config_text;     // fully resolved config, parseable as-is
  std::int64_t seed = 0;
  std::string version;
  double wall_clock_sec = 0.0;
  std::vector<std::string> artifacts;   // file names relative to the run dir
  std::string final_metrics;            // last metrics.jsonl line, verbatim
  std::map<std::string, double> extras; // per-verb scalars (e.g. in_support)
};

// manifest.json under `dir`, written to a temp name and renamed into place.
void write_manifest(const std::string& dir, const RunManifest& m);
RunManifest read_manifest(const std::string& dir);

// One JSON object per line, fixed key order, locale-free number formatting:
// rerunning a command with the same config and seed reproduces the file
// byte for byte.
std::string metrics_line(const MetricsRecord& rec);
MetricsRecord metrics_from_line(const std::string& line);

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  ~MetricsWriter();
  void write(const MetricsRecord& rec);
  const std::string& last_line() const { return last_; }

 private:
  std::string path_;
  std::string last_;
  std::unique_ptr<std::ofstream> out_;
};

std::vector<MetricsRecord> read_metrics(const std::string& path);

// Plain CSVs with headers; numbers printed with %.17g so they read back
// bit-exact.
void write_samples_csv(const std::string& path,
                       const Eigen::Ref<const Batch>& x);
Batch read_samples_csv(const std::string& path);

struct VelocityDump {
  Batch at;            // where the field was evaluated
  VelocityReport rep;  // the three components (total is recomputable)
};
void write_velocity_csv(const std::string& path,
                        const Eigen::Ref<const Batch>& at,
                        const VelocityReport& rep);
VelocityDump read_velocity_csv(const std::string& path);

void write_bandit_csv(const std::string& path, const BanditDataset& ds);
BanditDataset read_bandit_csv(const std::string& path);

// Static, self-contained SVGs. Same inputs give identical bytes.
// Scatter: marching-squares contours of `density` (laid out like
// tilted_density_grid over `box`) under one dot per sample row.
std::string svg_scatter(const GridBox& box, const Matrix& density,
                        const Eigen::Ref<const Batch>& samples);
// Quiver: the three velocity components drawn as arrows at each base point.
std::string svg_quiver(const GridBox& box, const Eigen::Ref<const Batch>& at,
                       const VelocityReport& rep);

}  // namespace fav
