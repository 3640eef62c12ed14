#include "fav/train.hpp"

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "fav/checkpoint.hpp"
#include "fav/mixture.hpp"
#include "fav/reward.hpp"
#include "fav/tilted.hpp"

namespace fav {

namespace {

// Every sampling site below hangs off one labeled substream of the run seed,
// so a value never depends on how many draws some other site made. The eval
// stream is additionally keyed by step: the record at step k is recomputable
// from (seed, k) alone, which is what lets `fav eval` re-derive the final
// metrics line of a finished run and compare bytes.
RngStream eval_stream(std::uint64_t seed, Index step) {
  return RngStream(seed).split("eval").split(static_cast<std::uint64_t>(step));
}

TiltedTarget target_for(double beta, GridBox box = {}) {
  GaussianMixture base = eight_gaussians();
  return make_tilted(base, SoftClusterReward{base.centers}, beta, box);
}

TermMask mask_from_ablate(const std::string& ablate) {
  TermMask m;
  if (ablate == "prior")
    m.prior = false;
  else if (ablate == "reward")
    m.reward = false;
  else if (ablate == "repulsive")
    m.repulsive = false;
  else
    require(ablate.empty(), "ablate: expected prior, reward or repulsive, got '" +
                                ablate + "'");
  return m;
}

OptState opt_state_for(AnyModel& m) {
  if (m.kind == "vae") return opt_init({&m.vae.encoder, &m.vae.decoder});
  if (m.kind == "drifting") return opt_init({&m.drifting.net});
  return opt_init({&m.meanflow.net});
}

}  // namespace

// ---------------------------------------------------------------------------
// Model dispatch.

AnyModel AnyModel::init(const std::string& kind, RngStream& rng) {
  AnyModel m;
  m.kind = kind;
  if (kind == "vae")
    m.vae = vae_init(rng);
  else if (kind == "drifting")
    m.drifting = drifting_init(rng);
  else if (kind == "meanflow")
    m.meanflow = meanflow_init(rng);
  else
    throw std::runtime_error("unknown generator kind '" + kind +
                             "' (expected vae, drifting or meanflow)");
  return m;
}

AnyModel AnyModel::from_checkpoint(const Checkpoint& ck) {
  AnyModel m;
  m.kind = ck.flavor;
  if (ck.flavor == "vae")
    m.vae = vae_from_checkpoint(ck);
  else if (ck.flavor == "drifting")
    m.drifting = drifting_from_checkpoint(ck);
  else if (ck.flavor == "meanflow")
    m.meanflow = meanflow_from_checkpoint(ck);
  else
    throw std::runtime_error("checkpoint flavor '" + ck.flavor +
                             "' is not a generator");
  return m;
}

Checkpoint AnyModel::to_ckpt() const {
  if (kind == "vae") return to_checkpoint(vae);
  if (kind == "drifting") return to_checkpoint(drifting);
  return to_checkpoint(meanflow);
}

Batch AnyModel::sample(Index n, RngStream& rng, Index mf_steps) const {
  if (kind == "vae") return vae_sample(vae, n, rng);
  if (kind == "drifting") return drifting_sample(drifting, n, rng);
  return meanflow_sample(meanflow, n, mf_steps, rng);
}

GeneratorHandle AnyModel::handle(Index mf_steps) {
  if (kind == "vae") return vae_generator(vae);
  if (kind == "drifting") return drifting_generator(drifting);
  return meanflow_generator(meanflow, mf_steps);
}

OptConfig AnyModel::opt_config() const {
  OptConfig o;  // Adam(0.9, 0.999), lr 1e-3: the vae/drifting recipe
  if (kind == "meanflow") {
    o.lr = 3e-4;
    o.beta2 = 0.95;
    o.clip_norm = 1.0;
  }
  return o;
}

// ---------------------------------------------------------------------------
// Drivers.

MetricsRecord eval_samples(const Eigen::Ref<const Batch>& samples,
                           const TiltedTarget& target, Index step,
                           std::uint64_t seed) {
  MetricsRecord rec;
  rec.step = step;
  rec.seed = static_cast<std::int64_t>(seed);
  rec.kl_nats = kl_to_target(samples, target);
  rec.mean_reward = mean_reward(samples, target.reward);
  rec.mode_masses = mode_masses(samples, target.base.centers);
  return rec;
}

PretrainOutcome pretrain_model(const PretrainSection& pre,
                               const EvalSection& ev, std::uint64_t seed,
                               const MetricsSink& sink) {
  require(pre.batch >= 1 && pre.pool >= 1, "pretrain: empty batch or pool");
  require(ev.every >= 1, "eval: cadence must be positive");
  RngStream root(seed);
  RngStream data_rng = root.split("data");
  RngStream init_rng = root.split("init");
  RngStream train_rng = root.split("train");

  GaussianMixture base = eight_gaussians();
  Batch pool = mixture_sample(base, pre.pool, data_rng);
  AnyModel model = AnyModel::init(pre.kind, init_rng);
  OptConfig ocfg = model.opt_config();
  OptState opt = opt_state_for(model);

  // Pre-training matches the plain data distribution, i.e. the tilt at
  // beta = 0; the reward column is still reported so the later shift of the
  // fine-tuned runs has a baseline.
  TiltedTarget target = target_for(0.0);

  PretrainOutcome out;
  auto eval_at = [&](Index step) {
    RngStream er = eval_stream(seed, step);
    out.final_samples = model.sample(ev.n, er, pre.sample_steps);
    out.final_record = eval_samples(out.final_samples, target, step, seed);
    sink(out.final_record);
  };
  eval_at(0);

  Batch mb(pre.batch, 2);
  for (Index step = 1; step <= pre.steps; ++step) {
    for (Index r = 0; r < pre.batch; ++r)
      mb.row(r) = pool.row(train_rng.uniform_index(pool.rows()));
    if (model.kind == "vae")
      vae_train_step(model.vae, mb, ocfg, opt, train_rng);
    else if (model.kind == "drifting")
      drifting_train_step(model.drifting, mb, ocfg, opt, train_rng);
    else
      meanflow_train_step(model.meanflow, mb, ocfg, opt, train_rng);
    if (step % ev.every == 0 || step == pre.steps) eval_at(step);
  }
  out.model = model.to_ckpt();
  return out;
}

FinetuneOutcome finetune_model(const Checkpoint& init,
                               const FinetuneSection& ft,
                               const EvalSection& ev, std::uint64_t seed,
                               const MetricsSink& sink) {
  require(ev.every >= 1, "eval: cadence must be positive");
  AnyModel model = AnyModel::from_checkpoint(init);
  // The reference distribution is the generator as it was before any update;
  // a second instance of the checkpoint stays frozen and only samples.
  AnyModel frozen = AnyModel::from_checkpoint(init);

  RngStream root(seed);
  RngStream ref_rng = root.split("ref");
  RngStream train_rng = root.split("train");

  GaussianMixture base = eight_gaussians();
  SoftClusterReward sc{base.centers};
  TiltedTarget target = make_tilted(base, sc, ft.beta);
  RewardOracle reward = make_oracle(sc);
  if (ft.zeroth_order) {
    RngStream zo = root.split("zo");
    reward = zeroth_order_oracle(
        [sc](const Eigen::Ref<const Vec>& x) { return reward_value(sc, x); },
        ft.zo_eta, ft.zo_k, zo.next_u64());
  }

  FavConfig fc;
  fc.beta = ft.beta;
  fc.tau = ft.tau;
  fc.adaptive_bandwidth = ft.adaptive_bandwidth;
  fc.n_gen = ft.n_gen;
  fc.n_ref = ft.n_ref;
  fc.terms = mask_from_ablate(ft.ablate);

  GeneratorHandle gen = model.handle(ft.sample_steps);
  OptConfig ocfg = model.opt_config();
  OptState opt = opt_init({gen.params});

  FinetuneOutcome out;
  auto eval_at = [&](Index step) {
    RngStream er = eval_stream(seed, step);
    out.final_samples = model.sample(ev.n, er, ft.sample_steps);
    out.final_record = eval_samples(out.final_samples, target, step, seed);
    sink(out.final_record);
  };
  eval_at(0);
  out.pre_record = out.final_record;

  for (Index step = 1; step <= ft.steps; ++step) {
    Batch ref = frozen.sample(ft.n_ref, ref_rng, ft.sample_steps);
    fav_train_step(gen, ref, reward, fc, ocfg, opt, train_rng);
    if (step % ev.every == 0 || step == ft.steps) eval_at(step);
  }

  // Field snapshot at fresh generated points for the quiver plot.
  RngStream vel_rng = root.split("velocity");
  out.final_velocity.at = model.sample(ft.n_gen, vel_rng, ft.sample_steps);
  Batch ref = frozen.sample(ft.n_ref, vel_rng, ft.sample_steps);
  out.final_velocity.rep = fav_velocity(out.final_velocity.at, ref, reward, fc);

  out.model = model.to_ckpt();
  return out;
}

SvgdOutcome run_svgd(const SvgdSection& sv, const EvalSection&,
                     std::uint64_t seed, const MetricsSink& sink) {
  TiltedTarget target = target_for(sv.beta);
  SvgdConfig cfg;
  cfg.n_particles = sv.particles;
  cfg.n_iters = sv.iters;
  cfg.step_size = sv.step_size;
  cfg.kernel = KernelSpec{KernelFamily::gaussian_rbf, sv.tau};

  RngStream rng = RngStream(seed).split("svgd");
  SvgdResult res = svgd_sample(target, cfg, rng);

  SvgdOutcome out;
  out.particles = res.particles;
  out.restarts = res.restarts;
  out.record.step = sv.iters;
  out.record.seed = static_cast<std::int64_t>(seed);
  // The KL estimator needs more particles than a typical SVGD run carries;
  // small swarms report 0 there and are judged on reward and masses.
  out.record.kl_nats =
      sv.particles >= 1000 ? kl_to_target(res.particles, target) : 0.0;
  out.record.mean_reward = mean_reward(res.particles, target.reward);
  out.record.mode_masses = mode_masses(res.particles, target.base.centers);
  sink(out.record);
  return out;
}

PolicyRunOutcome run_policy(const PolicySection& pol, const EvalSection& ev,
                            std::uint64_t seed, const MetricsSink& sink) {
  require(ev.every >= 1, "eval: cadence must be positive");
  require(pol.state_batch >= 1, "policy: state batch must be positive");
  BanditTask task = make_bandit();
  RngStream root(seed);
  RngStream data_rng = root.split("data");
  RngStream init_rng = root.split("init");
  RngStream train_rng = root.split("train");

  PolicyRunOutcome out;
  out.dataset = build_dataset(task, pol.n_states, pol.actions_per_state,
                              data_rng);
  out.data_coverage = dataset_coverage(task, out.dataset, 0.2);

  PolicyModel p = policy_init(init_rng);
  PolicyFtConfig pcfg;
  pcfg.beta = pol.beta;
  pcfg.tau = pol.tau;
  pcfg.adaptive_bandwidth = pol.adaptive_bandwidth;
  pcfg.n_particles = pol.particles;
  pcfg.k_neighbors = pol.k_neighbors;
  pcfg.zeroth_order = pol.zeroth_order;
  pcfg.zo_eta = pol.zo_eta;
  pcfg.zo_k = pol.zo_k;
  OptConfig ocfg;  // the policy net is trained fresh: plain Adam, lr 1e-3
  OptState opt = opt_init({&p.net});

  auto eval_at = [&](Index step) {
    RngStream er = eval_stream(seed, step);
    out.final_eval = evaluate_policy(p, task, ev.n, er);
    MetricsRecord rec;
    rec.step = step;
    rec.seed = static_cast<std::int64_t>(seed);
    rec.mean_reward = out.final_eval.mean_q;  // Q plays the role of reward
    rec.mode_masses = out.final_eval.mode_coverage;
    sink(rec);
    out.final_record = rec;
  };
  eval_at(0);

  for (Index step = 1; step <= pol.steps; ++step) {
    Batch states(pol.state_batch, 2);
    for (Index r = 0; r < states.rows(); ++r)
      for (Index c = 0; c < states.cols(); ++c)
        states(r, c) = 2.0 * train_rng.uniform() - 1.0;
    fav_policy_step(p, states, task, out.dataset, pcfg, ocfg, opt, train_rng);
    if (step % ev.every == 0 || step == pol.steps) eval_at(step);
  }
  out.model = to_checkpoint(p);
  return out;
}

// ---------------------------------------------------------------------------
// Config file text. Written by hand so the bytes are stable: fixed key order,
// %.17g numbers, every string quoted. The parser below reads this same format
// through the CLI option table, so a file, a flag and a default are all the
// same option with the same validation.

namespace {

void kv(std::string& s, const char* key, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  s += key;
  s += '=';
  s += buf;
  s += '\n';
}

void kv(std::string& s, const char* key, Index v) {
  s += key;
  s += '=';
  s += std::to_string(static_cast<long long>(v));
  s += '\n';
}

void kv(std::string& s, const char* key, std::uint64_t v) {
  s += key;
  s += '=';
  s += std::to_string(v);
  s += '\n';
}

void kv(std::string& s, const char* key, bool v) {
  s += key;
  s += v ? "=true\n" : "=false\n";
}

void kv(std::string& s, const char* key, const std::string& v) {
  s += key;
  s += "=\"";
  s += v;
  s += "\"\n";
}

}  // namespace

std::string config_text(const ExperimentConfig& c) {
  std::string s;
  s += "# fav experiment configuration; print the defaults with\n";
  s += "# `fav config --dump-defaults`.\n";
  kv(s, "seed", c.seed);
  kv(s, "out", c.out);
  kv(s, "paper_scale", c.paper_scale);

  s += "\n[pretrain]\n";
  kv(s, "kind", c.pretrain.kind);
  kv(s, "steps", c.pretrain.steps);
  kv(s, "batch", c.pretrain.batch);
  kv(s, "pool", c.pretrain.pool);
  kv(s, "sample_steps", c.pretrain.sample_steps);

  s += "\n[finetune]\n";
  kv(s, "checkpoint", c.finetune.checkpoint);
  kv(s, "steps", c.finetune.steps);
  kv(s, "beta", c.finetune.beta);
  kv(s, "tau", c.finetune.tau);
  kv(s, "adaptive_bandwidth", c.finetune.adaptive_bandwidth);
  kv(s, "n_gen", c.finetune.n_gen);
  kv(s, "n_ref", c.finetune.n_ref);
  kv(s, "sample_steps", c.finetune.sample_steps);
  kv(s, "ablate", c.finetune.ablate);
  kv(s, "zeroth_order", c.finetune.zeroth_order);
  kv(s, "zo_eta", c.finetune.zo_eta);
  kv(s, "zo_k", c.finetune.zo_k);

  s += "\n[svgd]\n";
  kv(s, "particles", c.svgd.particles);
  kv(s, "iters", c.svgd.iters);
  kv(s, "step_size", c.svgd.step_size);
  kv(s, "tau", c.svgd.tau);
  kv(s, "beta", c.svgd.beta);

  s += "\n[policy]\n";
  kv(s, "steps", c.policy.steps);
  kv(s, "state_batch", c.policy.state_batch);
  kv(s, "beta", c.policy.beta);
  kv(s, "tau", c.policy.tau);
  kv(s, "adaptive_bandwidth", c.policy.adaptive_bandwidth);
  kv(s, "n_states", c.policy.n_states);
  kv(s, "actions_per_state", c.policy.actions_per_state);
  kv(s, "particles", c.policy.particles);
  kv(s, "k_neighbors", c.policy.k_neighbors);
  kv(s, "zeroth_order", c.policy.zeroth_order);
  kv(s, "zo_eta", c.policy.zo_eta);
  kv(s, "zo_k", c.policy.zo_k);

  s += "\n[eval]\n";
  kv(s, "every", c.eval.every);
  kv(s, "n", c.eval.n);

  s += "\n[sweep]\n";
  kv(s, "verb", c.sweep.verb);
  kv(s, "param", c.sweep.param);
  kv(s, "values", c.sweep.values);
  kv(s, "seeds", c.sweep.seeds);
  return s;
}

// ---------------------------------------------------------------------------
// Option table. Config sections route to the same-named subcommand, so each
// verb carries its section's options; `[policy]` reaches policy-extract
// through an alias. The spec's short flags (--steps, --beta, ...) live on the
// main app, fall through from any verb position, and are applied to whichever
// verb ran after parsing; they are barred from config files where the
// sectioned spelling is unambiguous.

namespace {

ParsedCli parse_args(const std::vector<std::string>& args, bool interactive) {
  ParsedCli p;
  ExperimentConfig& c = p.cfg;

  CLI::App app{"Sample-based variational fine-tuning of toy generators",
               "fav"};
  app.require_subcommand(0, 1);
  app.set_config("--config", "", "read options from a config file");
  app.allow_config_extras(false);  // unknown config keys are hard errors

  app.add_option("--seed", c.seed, "root seed for the whole run");
  app.add_option("--out", c.out,
                 "run directory (default runs/<verb>[-<kind>]-s<seed>)");
  app.add_flag("--paper-scale,--paper_scale", c.paper_scale,
               "preset: paper-sized pre-training (1M steps, batch 8192)");

  // Transient per-invocation overrides.
  long long ov_steps = 0;
  double ov_beta = 0.0;
  double ov_tau = 0.0;
  std::string ov_ablate;
  std::string ov_zo;
  auto* o_steps = app.add_option("--steps", ov_steps,
                                 "override the active verb's step count")
                      ->configurable(false)
                      ->check(CLI::NonNegativeNumber);
  auto* o_beta =
      app.add_option("--beta", ov_beta, "override the reward tilt strength")
          ->configurable(false);
  auto* o_tau =
      app.add_option("--tau", ov_tau, "override the kernel width tau = 2 sigma^2")
          ->configurable(false)
          ->check(CLI::PositiveNumber);
  auto* o_adaptive =
      app.add_flag("--adaptive-bandwidth",
                   "override: bandwidth from Scott's rule per reference batch")
          ->configurable(false);
  auto* o_ablate =
      app.add_option("--ablate", ov_ablate, "drop one velocity term")
          ->configurable(false)
          ->check(CLI::IsMember({"prior", "reward", "repulsive"}));
  auto* o_zo = app.add_option(
                      "--zeroth-order", ov_zo,
                      "'eta,K': estimate reward gradients from values only")
                   ->configurable(false);

  CLI::App* s_pre =
      app.add_subcommand("pretrain", "train a generator on the 2-D mixture");
  s_pre->fallthrough();
  auto* o_pre_kind =
      s_pre->add_option("--kind", c.pretrain.kind, "vae | drifting | meanflow")
          ->check(CLI::IsMember({"vae", "drifting", "meanflow"}));
  auto* o_pre_steps = s_pre->add_option("--steps", c.pretrain.steps)
                          ->check(CLI::NonNegativeNumber);
  auto* o_pre_batch =
      s_pre->add_option("--batch", c.pretrain.batch)->check(CLI::PositiveNumber);
  auto* o_pre_pool =
      s_pre->add_option("--pool", c.pretrain.pool)->check(CLI::PositiveNumber);
  s_pre->add_option("--sample-steps,--sample_steps", c.pretrain.sample_steps,
                    "MeanFlow sampler steps at evaluation time");
  (void)o_pre_kind;

  CLI::App* s_ft = app.add_subcommand(
      "finetune", "amortized transport toward the reward-tilted target");
  s_ft->fallthrough();
  s_ft->add_option("--checkpoint", c.finetune.checkpoint,
                   "pretrained model to start from");
  s_ft->add_option("--steps", c.finetune.steps)->check(CLI::NonNegativeNumber);
  s_ft->add_option("--beta", c.finetune.beta);
  s_ft->add_option("--tau", c.finetune.tau)->check(CLI::PositiveNumber);
  s_ft->add_flag("--adaptive_bandwidth", c.finetune.adaptive_bandwidth);
  s_ft->add_option("--n-gen,--n_gen", c.finetune.n_gen)
      ->check(CLI::PositiveNumber);
  s_ft->add_option("--n-ref,--n_ref", c.finetune.n_ref)
      ->check(CLI::PositiveNumber);
  s_ft->add_option("--sample-steps,--sample_steps", c.finetune.sample_steps);
  s_ft->add_option("--ablate", c.finetune.ablate)
      ->check(CLI::IsMember({"", "prior", "reward", "repulsive"}));
  s_ft->add_flag("--zeroth_order", c.finetune.zeroth_order);
  s_ft->add_option("--zo-eta,--zo_eta", c.finetune.zo_eta)
      ->check(CLI::PositiveNumber);
  s_ft->add_option("--zo-k,--zo_k", c.finetune.zo_k)
      ->check(CLI::PositiveNumber);

  CLI::App* s_sv = app.add_subcommand(
      "svgd", "particle transport to the tilted target (gold sampler)");
  s_sv->fallthrough();
  s_sv->add_option("--particles", c.svgd.particles)->check(CLI::PositiveNumber);
  s_sv->add_option("--iters", c.svgd.iters)->check(CLI::NonNegativeNumber);
  s_sv->add_option("--step-size,--step_size", c.svgd.step_size)
      ->check(CLI::PositiveNumber);
  s_sv->add_option("--tau", c.svgd.tau)->check(CLI::PositiveNumber);
  s_sv->add_option("--beta", c.svgd.beta);

  CLI::App* s_pol = app.add_subcommand(
      "policy-extract", "Q-tilted policy extraction on the synthetic bandit");
  s_pol->alias("policy");
  s_pol->fallthrough();
  s_pol->add_option("--steps", c.policy.steps)->check(CLI::NonNegativeNumber);
  s_pol->add_option("--state-batch,--state_batch", c.policy.state_batch)
      ->check(CLI::PositiveNumber);
  s_pol->add_option("--beta", c.policy.beta);
  s_pol->add_option("--tau", c.policy.tau)->check(CLI::PositiveNumber);
  s_pol->add_flag("--adaptive_bandwidth", c.policy.adaptive_bandwidth);
  s_pol->add_option("--n-states,--n_states", c.policy.n_states)
      ->check(CLI::PositiveNumber);
  s_pol->add_option("--actions-per-state,--actions_per_state",
                    c.policy.actions_per_state)
      ->check(CLI::PositiveNumber);
  s_pol->add_option("--particles", c.policy.particles)
      ->check(CLI::PositiveNumber);
  s_pol->add_option("--k-neighbors,--k_neighbors", c.policy.k_neighbors)
      ->check(CLI::PositiveNumber);
  s_pol->add_flag("--zeroth_order", c.policy.zeroth_order);
  s_pol->add_option("--zo-eta,--zo_eta", c.policy.zo_eta)
      ->check(CLI::PositiveNumber);
  s_pol->add_option("--zo-k,--zo_k", c.policy.zo_k)
      ->check(CLI::PositiveNumber);

  CLI::App* s_eval = app.add_subcommand(
      "eval", "recompute a finished run's final metrics and compare");
  s_eval->fallthrough();
  s_eval->add_option("dir", p.run_dir_arg, "run directory");
  s_eval->add_option("--every", c.eval.every, "evaluation cadence in steps")
      ->check(CLI::PositiveNumber);
  s_eval->add_option("--n", c.eval.n, "samples per evaluation")
      ->check(CLI::PositiveNumber);

  CLI::App* s_plot =
      app.add_subcommand("plot", "render a run's samples and velocity field");
  s_plot->fallthrough();
  s_plot->add_option("dir", p.run_dir_arg, "run directory");

  CLI::App* s_sw = app.add_subcommand(
      "sweep", "fan one verb out over a parameter grid and seeds");
  s_sw->fallthrough();
  s_sw->add_option("--verb", c.sweep.verb)
      ->check(CLI::IsMember({"finetune", "policy-extract"}));
  s_sw->add_option("--param", c.sweep.param)
      ->check(CLI::IsMember({"beta", "tau"}));
  s_sw->add_option("--values", c.sweep.values, "comma-separated grid");
  s_sw->add_option("--seeds", c.sweep.seeds, "seeds per grid point")
      ->check(CLI::PositiveNumber);

  CLI::App* s_cfg =
      app.add_subcommand("config", "print the resolved configuration");
  s_cfg->fallthrough();
  s_cfg->add_flag("--dump-defaults", p.dump_defaults,
                  "print the built-in defaults instead")
      ->configurable(false);

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("fav");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    // Config-text parsing wants exceptions; the CLI entry point wants the
    // message (or the help text, which "fails" with exit code 0) printed.
    if (!interactive && e.get_exit_code() != 0)
      throw std::runtime_error(std::string(e.get_name()) + ": " + e.what());
    p.done = true;
    p.exit_code = app.exit(e);
    return p;
  }

  std::vector<CLI::App*> got = app.get_subcommands();
  p.verb = got.empty() ? "" : got.front()->get_name();

  // The preset only fills fields the invocation left untouched, so an
  // explicit --steps or config key still wins.
  if (c.paper_scale) {
    if (!o_pre_steps->count() && !o_steps->count())
      c.pretrain.steps = 1000000;
    if (!o_pre_batch->count()) c.pretrain.batch = 8192;
    if (!o_pre_pool->count()) c.pretrain.pool = 2000000;
  }

  auto wrong_verb = [&](const char* flag) {
    throw std::runtime_error(std::string(flag) + " does not apply to verb '" +
                             p.verb + "'");
  };
  if (o_steps->count()) {
    if (p.verb == "pretrain")
      c.pretrain.steps = ov_steps;
    else if (p.verb == "finetune")
      c.finetune.steps = ov_steps;
    else if (p.verb == "svgd")
      c.svgd.iters = ov_steps;
    else if (p.verb == "policy-extract")
      c.policy.steps = ov_steps;
    else
      wrong_verb("--steps");
  }
  if (o_beta->count()) {
    if (p.verb == "finetune")
      c.finetune.beta = ov_beta;
    else if (p.verb == "svgd")
      c.svgd.beta = ov_beta;
    else if (p.verb == "policy-extract")
      c.policy.beta = ov_beta;
    else
      wrong_verb("--beta");
  }
  if (o_tau->count()) {
    if (p.verb == "finetune")
      c.finetune.tau = ov_tau;
    else if (p.verb == "svgd")
      c.svgd.tau = ov_tau;
    else if (p.verb == "policy-extract")
      c.policy.tau = ov_tau;
    else
      wrong_verb("--tau");
  }
  if (o_adaptive->count()) {
    if (p.verb == "finetune")
      c.finetune.adaptive_bandwidth = true;
    else if (p.verb == "policy-extract")
      c.policy.adaptive_bandwidth = true;
    else
      wrong_verb("--adaptive-bandwidth");
  }
  if (o_ablate->count()) {
    if (p.verb == "finetune")
      c.finetune.ablate = ov_ablate;
    else
      wrong_verb("--ablate");
  }
  if (o_zo->count()) {
    std::size_t comma = ov_zo.find(',');
    char* end = nullptr;
    double eta = std::strtod(ov_zo.c_str(), &end);
    long long k = comma == std::string::npos
                      ? 0
                      : std::strtoll(ov_zo.c_str() + comma + 1, &end, 10);
    if (comma == std::string::npos || eta <= 0.0 || k < 1 || *end != '\0')
      throw std::runtime_error("--zeroth-order expects 'eta,K', got '" + ov_zo +
                               "'");
    if (p.verb == "finetune") {
      c.finetune.zeroth_order = true;
      c.finetune.zo_eta = eta;
      c.finetune.zo_k = k;
    } else if (p.verb == "policy-extract") {
      c.policy.zeroth_order = true;
      c.policy.zo_eta = eta;
      c.policy.zo_k = k;
    } else {
      wrong_verb("--zeroth-order");
    }
  }

  if (p.verb.empty() && interactive) {
    std::fputs(app.help().c_str(), stdout);
    p.done = true;
  }
  (void)s_eval;
  (void)s_plot;
  return p;
}

}  // namespace

ParsedCli parse_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  args.reserve(argc > 0 ? argc - 1 : 0);
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return parse_args(args, /*interactive=*/true);
}

ExperimentConfig config_from_text(const std::string& text) {
  namespace fs = std::filesystem;
  static std::atomic<unsigned> counter{0};
  fs::path tmp = fs::temp_directory_path() /
                 ("fav-config-" + std::to_string(::getpid()) + "-" +
                  std::to_string(counter.fetch_add(1)) + ".ini");
  {
    std::ofstream f(tmp);
    f << text;
    f.flush();
    require(static_cast<bool>(f), "config: cannot stage " + tmp.string());
  }
  try {
    ParsedCli r = parse_args({"--config", tmp.string()}, /*interactive=*/false);
    fs::remove(tmp);
    return r.cfg;
  } catch (...) {
    fs::remove(tmp);
    throw;
  }
}

// ---------------------------------------------------------------------------
// Commands. Each wraps one driver in a run directory: manifest written as
// "running" up front, metrics streamed as they come, artifacts saved, then
// the manifest rewritten as "complete" with the final metrics line.

namespace {

std::string run_dir_for(const ExperimentConfig& cfg, const std::string& verb) {
  if (!cfg.out.empty()) return cfg.out;
  std::string d = "runs/" + verb;
  if (verb == "pretrain") d += "-" + cfg.pretrain.kind;
  return d + "-s" + std::to_string(cfg.seed);
}

class RunScope {
 public:
  RunScope(const ExperimentConfig& cfg, const std::string& verb)
      : dir_(run_dir_for(cfg, verb)), t0_(std::chrono::steady_clock::now()) {
    std::filesystem::create_directories(dir_);
    man_.command = verb;
    man_.config_text = config_text(cfg);
    man_.seed = static_cast<std::int64_t>(cfg.seed);
    man_.version = code_version();
    write_manifest(dir_, man_);
  }

  const std::string& dir() const { return dir_; }

  void finish(const std::string& final_metrics,
              std::vector<std::string> artifacts,
              std::map<std::string, double> extras = {}) {
    man_.status = "complete";
    man_.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_)
            .count();
    man_.artifacts = std::move(artifacts);
    man_.final_metrics = final_metrics;
    man_.extras = std::move(extras);
    write_manifest(dir_, man_);
    std::printf("run complete: %s (%.1fs)\n", dir_.c_str(),
                man_.wall_clock_sec);
  }

 private:
  std::string dir_;
  RunManifest man_;
  std::chrono::steady_clock::time_point t0_;
};

MetricsSink printing_sink(MetricsWriter& w) {
  return [&w](const MetricsRecord& r) {
    w.write(r);
    std::printf("step %7lld  kl %8.4f  reward %8.4f  min-mass %6.4f\n",
                static_cast<long long>(r.step), r.kl_nats, r.mean_reward,
                r.mode_masses.size() > 0 ? r.mode_masses.minCoeff() : 0.0);
    std::fflush(stdout);
  };
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  f.flush();
  require(static_cast<bool>(f), "cannot write " + path);
}

}  // namespace

int cmd_pretrain(const ExperimentConfig& cfg) {
  RunScope run(cfg, "pretrain");
  MetricsWriter mw(run.dir() + "/metrics.jsonl");
  PretrainOutcome out =
      pretrain_model(cfg.pretrain, cfg.eval, cfg.seed, printing_sink(mw));
  save_checkpoint(run.dir() + "/model.ckpt", out.model);
  write_samples_csv(run.dir() + "/samples.csv", out.final_samples);
  run.finish(mw.last_line(), {"metrics.jsonl", "model.ckpt", "samples.csv"});
  return 0;
}

int cmd_finetune(const ExperimentConfig& cfg) {
  require(!cfg.finetune.checkpoint.empty(),
          "finetune.checkpoint: no pretrained model given");
  Checkpoint init = load_checkpoint(cfg.finetune.checkpoint);
  RunScope run(cfg, "finetune");
  MetricsWriter mw(run.dir() + "/metrics.jsonl");
  FinetuneOutcome out =
      finetune_model(init, cfg.finetune, cfg.eval, cfg.seed, printing_sink(mw));
  save_checkpoint(run.dir() + "/model.ckpt", out.model);
  write_samples_csv(run.dir() + "/samples.csv", out.final_samples);
  write_velocity_csv(run.dir() + "/velocity.csv", out.final_velocity.at,
                     out.final_velocity.rep);
  run.finish(mw.last_line(),
             {"metrics.jsonl", "model.ckpt", "samples.csv", "velocity.csv"},
             {{"pre_kl", out.pre_record.kl_nats},
              {"pre_reward", out.pre_record.mean_reward}});
  return 0;
}

int cmd_svgd(const ExperimentConfig& cfg) {
  RunScope run(cfg, "svgd");
  MetricsWriter mw(run.dir() + "/metrics.jsonl");
  SvgdOutcome out = run_svgd(cfg.svgd, cfg.eval, cfg.seed, printing_sink(mw));
  write_samples_csv(run.dir() + "/samples.csv", out.particles);
  run.finish(mw.last_line(), {"metrics.jsonl", "samples.csv"},
             {{"restarts", static_cast<double>(out.restarts)}});
  return 0;
}

int cmd_policy(const ExperimentConfig& cfg) {
  RunScope run(cfg, "policy-extract");
  MetricsWriter mw(run.dir() + "/metrics.jsonl");
  PolicyRunOutcome out =
      run_policy(cfg.policy, cfg.eval, cfg.seed, printing_sink(mw));
  save_checkpoint(run.dir() + "/model.ckpt", out.model);
  write_bandit_csv(run.dir() + "/dataset.csv", out.dataset);
  // Emitted actions over fresh states, for the scatter plot.
  PolicyModel p = policy_from_checkpoint(out.model);
  RngStream disp = RngStream(cfg.seed).split("display");
  Batch states(cfg.eval.n, 2);
  for (Index r = 0; r < states.rows(); ++r)
    for (Index c = 0; c < states.cols(); ++c)
      states(r, c) = 2.0 * disp.uniform() - 1.0;
  write_samples_csv(run.dir() + "/samples.csv",
                    policy_actions(p, states, disp));
  run.finish(
      mw.last_line(),
      {"metrics.jsonl", "model.ckpt", "dataset.csv", "samples.csv"},
      {{"in_support", out.final_eval.in_support},
       {"dataset_mean_q", out.data_coverage.mean_q},
       {"two_mode_fraction", out.data_coverage.two_mode_fraction}});
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  const SweepSection& sw = cfg.sweep;
  std::vector<double> values;
  for (std::size_t at = 0; at < sw.values.size();) {
    std::size_t comma = sw.values.find(',', at);
    std::string tok = sw.values.substr(
        at, comma == std::string::npos ? std::string::npos : comma - at);
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    require(end != tok.c_str() && *end == '\0',
            "sweep.values: bad number '" + tok + "'");
    values.push_back(v);
    at = comma == std::string::npos ? sw.values.size() : comma + 1;
  }
  require(!values.empty(), "sweep.values: empty grid");

  RunScope run(cfg, "sweep");
  std::string summary = "value,seed,kl_nats,mean_reward,min_mass,in_support\n";
  for (double v : values) {
    for (Index s = 0; s < sw.seeds; ++s) {
      ExperimentConfig sub = cfg;
      sub.seed = cfg.seed + static_cast<std::uint64_t>(s);
      char vbuf[32];
      std::snprintf(vbuf, sizeof vbuf, "%g", v);
      sub.out = run.dir() + "/" + sw.param + vbuf + "-s" +
                std::to_string(sub.seed);
      if (sw.verb == "finetune") {
        (sw.param == "beta" ? sub.finetune.beta : sub.finetune.tau) = v;
        cmd_finetune(sub);
      } else {
        (sw.param == "beta" ? sub.policy.beta : sub.policy.tau) = v;
        cmd_policy(sub);
      }
      RunManifest man = read_manifest(sub.out);
      MetricsRecord rec = metrics_from_line(man.final_metrics);
      double in_support = 0.0;
      auto it = man.extras.find("in_support");
      if (it != man.extras.end()) in_support = it->second;
      char row[256];
      std::snprintf(row, sizeof row, "%.17g,%lld,%.17g,%.17g,%.17g,%.17g\n", v,
                    static_cast<long long>(sub.seed), rec.kl_nats,
                    rec.mean_reward,
                    rec.mode_masses.size() > 0 ? rec.mode_masses.minCoeff()
                                               : 0.0,
                    in_support);
      summary += row;
    }
  }
  write_text_file(run.dir() + "/summary.csv", summary);
  run.finish("", {"summary.csv"});
  return 0;
}

int cmd_eval(const std::string& run_dir) {
  require(!run_dir.empty(), "eval: run directory argument required");
  RunManifest man = read_manifest(run_dir);
  require(man.status == "complete",
          run_dir + ": run is not complete (status '" + man.status + "')");
  ExperimentConfig cfg = config_from_text(man.config_text);
  MetricsRecord want = metrics_from_line(man.final_metrics);
  const std::uint64_t seed = static_cast<std::uint64_t>(man.seed);

  MetricsRecord got;
  if (man.command == "pretrain" || man.command == "finetune") {
    const bool ft = man.command == "finetune";
    Checkpoint ck = load_checkpoint(run_dir + "/model.ckpt");
    AnyModel model = AnyModel::from_checkpoint(ck);
    TiltedTarget target = target_for(ft ? cfg.finetune.beta : 0.0);
    RngStream er = eval_stream(seed, want.step);
    Batch samples = model.sample(
        cfg.eval.n, er,
        ft ? cfg.finetune.sample_steps : cfg.pretrain.sample_steps);
    got = eval_samples(samples, target, want.step, seed);
  } else if (man.command == "svgd") {
    SvgdOutcome out =
        run_svgd(cfg.svgd, cfg.eval, seed, [](const MetricsRecord&) {});
    got = out.record;
  } else if (man.command == "policy-extract") {
    Checkpoint ck = load_checkpoint(run_dir + "/model.ckpt");
    PolicyModel p = policy_from_checkpoint(ck);
    RngStream er = eval_stream(seed, want.step);
    PolicyEval pe = evaluate_policy(p, make_bandit(), cfg.eval.n, er);
    got.step = want.step;
    got.seed = man.seed;
    got.mean_reward = pe.mean_q;
    got.mode_masses = pe.mode_coverage;
  } else {
    throw std::runtime_error("eval: no recompute path for verb '" +
                             man.command + "'");
  }

  std::string got_line = metrics_line(got);
  if (got_line == man.final_metrics) {
    std::printf("eval ok: %s\n  %s\n", run_dir.c_str(), got_line.c_str());
    return 0;
  }
  std::printf("eval MISMATCH: %s\n  manifest:   %s\n  recomputed: %s\n",
              run_dir.c_str(), man.final_metrics.c_str(), got_line.c_str());
  return 1;
}

int cmd_plot(const std::string& run_dir) {
  require(!run_dir.empty(), "plot: run directory argument required");
  RunManifest man = read_manifest(run_dir);
  ExperimentConfig cfg = config_from_text(man.config_text);
  Batch samples = read_samples_csv(run_dir + "/samples.csv");

  std::string scatter;
  if (man.command == "policy-extract") {
    // Actions live in [-1,1]^2 and there is no 2-D density to contour.
    GridBox box{-1.2, 1.2, 2};
    scatter = svg_scatter(box, Matrix::Zero(2, 2), samples);
  } else {
    double beta = man.command == "finetune"
                      ? cfg.finetune.beta
                      : (man.command == "svgd" ? cfg.svgd.beta : 0.0);
    GridBox box{-6.0, 6.0, 128};
    scatter = svg_scatter(box, tilted_density_grid(target_for(beta, box)),
                          samples);
  }
  write_text_file(run_dir + "/scatter.svg", scatter);
  std::printf("wrote %s/scatter.svg\n", run_dir.c_str());

  if (std::filesystem::exists(run_dir + "/velocity.csv")) {
    VelocityDump vd = read_velocity_csv(run_dir + "/velocity.csv");
    GridBox box{-6.0, 6.0, 128};
    write_text_file(run_dir + "/quiver.svg", svg_quiver(box, vd.at, vd.rep));
    std::printf("wrote %s/quiver.svg\n", run_dir.c_str());
  }
  return 0;
}

int cmd_config(const ExperimentConfig& cfg, bool dump_defaults) {
  const std::string text =
      config_text(dump_defaults ? ExperimentConfig{} : cfg);
  std::fwrite(text.data(), 1, text.size(), stdout);
  return 0;
}

}  // namespace fav
