#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fav/amortize.hpp"
#include "fav/bandit.hpp"
#include "fav/drifting.hpp"
#include "fav/meanflow.hpp"
#include "fav/metrics.hpp"
#include "fav/runio.hpp"
#include "fav/svgd.hpp"
#include "fav/vae.hpp"

namespace fav {

// ---------------------------------------------------------------------------
// Experiment configuration. One flat struct covers every verb; the config
// file uses one section per group below and every key has the default written
// here. Unknown keys are rejected at parse time.

struct PretrainSection {
  std::string kind = "meanflow";  // vae | drifting | meanflow
  Index steps = 100000;
  Index batch = 256;
  Index pool = 500000;     // size of the fixed training dataset
  Index sample_steps = 1;  // MeanFlow sampler steps used for evaluation
};

struct FinetuneSection {
  std::string checkpoint;  // path to the pretrained model
  Index steps = 5000;
  double beta = 1.0;
  double tau = 0.125;
  bool adaptive_bandwidth = false;
  Index n_gen = 256;
  Index n_ref = 256;
  Index sample_steps = 1;
  std::string ablate;  // "" | prior | reward | repulsive
  bool zeroth_order = false;
  double zo_eta = 1e-3;
  Index zo_k = 64;
};

struct SvgdSection {
  Index particles = 512;
  Index iters = 500;
  double step_size = 0.05;
  double tau = 2.0;
  double beta = 1.0;
};

struct PolicySection {
  Index steps = 4000;
  Index state_batch = 16;
  double beta = 2.0;
  double tau = 0.02;
  bool adaptive_bandwidth = false;
  Index n_states = 200;
  Index actions_per_state = 16;
  Index particles = 8;
  Index k_neighbors = 32;
  bool zeroth_order = false;
  double zo_eta = 1e-3;
  Index zo_k = 64;
};

struct EvalSection {
  Index every = 500;  // evaluation cadence in training steps
  Index n = 4096;     // samples per evaluation
};

struct SweepSection {
  std::string verb = "finetune";  // finetune | policy-extract
  std::string param = "beta";     // beta | tau
  std::string values = "0.5,1,2";
  Index seeds = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out;  // run directory; empty derives runs/<verb>[-<kind>]-s<seed>
  bool paper_scale = false;
  PretrainSection pretrain;
  FinetuneSection finetune;
  SvgdSection svgd;
  PolicySection policy;
  EvalSection eval;
  SweepSection sweep;
};

// Resolved config as config-file text (stable bytes; %.17g numbers).
std::string config_text(const ExperimentConfig& cfg);
// Parse config-file text through the same option table the CLI uses.
ExperimentConfig config_from_text(const std::string& text);

// Command-line front end. Returns the chosen verb plus the fully resolved
// config; `done` is set when parsing already finished the program (--help).
// Hard errors (bad flags, unknown config keys) throw std::runtime_error.
struct ParsedCli {
  std::string verb;
  ExperimentConfig cfg;
  std::string run_dir_arg;  // positional of eval/plot
  bool dump_defaults = false;
  bool done = false;
  int exit_code = 0;
};
ParsedCli parse_cli(int argc, const char* const* argv);

// ---------------------------------------------------------------------------
// Model dispatch over the three generator families.

struct AnyModel {
  std::string kind;  // "vae" | "drifting" | "meanflow"
  VaeModel vae;
  DriftingModel drifting;
  MeanFlowModel meanflow;

  static AnyModel init(const std::string& kind, RngStream& rng);
  static AnyModel from_checkpoint(const Checkpoint& ck);
  Checkpoint to_ckpt() const;
  Batch sample(Index n, RngStream& rng, Index mf_steps = 1) const;
  // Handle for fine-tuning; binds to this object, which must outlive it.
  GeneratorHandle handle(Index mf_steps = 1);
  // The optimizer family each kind was pretrained with.
  OptConfig opt_config() const;
};

// ---------------------------------------------------------------------------
// Run drivers. Each emits one MetricsRecord per evaluation through the sink
// (step 0, every eval.every steps, and the final step) and returns the end
// state. Drivers never touch the filesystem; commands do.

using MetricsSink = std::function<void(const MetricsRecord&)>;

// Evaluate one sample set against a tilted target (KL needs n >= 1000).
MetricsRecord eval_samples(const Eigen::Ref<const Batch>& samples,
                           const TiltedTarget& target, Index step,
                           std::uint64_t seed);

struct PretrainOutcome {
  Checkpoint model;
  MetricsRecord final_record;
  Batch final_samples;
};
PretrainOutcome pretrain_model(const PretrainSection& pre,
                               const EvalSection& ev, std::uint64_t seed,
                               const MetricsSink& sink);

struct FinetuneOutcome {
  Checkpoint model;
  MetricsRecord pre_record;    // step 0, before any update
  MetricsRecord final_record;
  Batch final_samples;
  VelocityDump final_velocity;
};
FinetuneOutcome finetune_model(const Checkpoint& init,
                               const FinetuneSection& ft,
                               const EvalSection& ev, std::uint64_t seed,
                               const MetricsSink& sink);

struct SvgdOutcome {
  Batch particles;
  MetricsRecord record;
  int restarts = 0;
};
SvgdOutcome run_svgd(const SvgdSection& sv, const EvalSection& ev,
                     std::uint64_t seed, const MetricsSink& sink);

struct PolicyRunOutcome {
  Checkpoint model;
  BanditDataset dataset;
  CoverageStats data_coverage;
  PolicyEval final_eval;
  MetricsRecord final_record;
};
PolicyRunOutcome run_policy(const PolicySection& pol, const EvalSection& ev,
                            std::uint64_t seed, const MetricsSink& sink);

// ---------------------------------------------------------------------------
// Commands: run-directory orchestration around the drivers. Each returns a
// process exit code.

int cmd_pretrain(const ExperimentConfig& cfg);
int cmd_finetune(const ExperimentConfig& cfg);
int cmd_svgd(const ExperimentConfig& cfg);
int cmd_policy(const ExperimentConfig& cfg);
int cmd_sweep(const ExperimentConfig& cfg);
// Recompute the final metrics recorded in run_dir's manifest; nonzero on any
// mismatch, making every run directory self-checking.
int cmd_eval(const std::string& run_dir);
int cmd_plot(const std::string& run_dir);
int cmd_config(const ExperimentConfig& cfg, bool dump_defaults);

}  // namespace fav
