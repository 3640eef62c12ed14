// Acceptance gate: one pass/fail line per criterion, each driving the public
// API end to end at desk scale, plus a handful of slower module-level checks
// that need the same pretrained models. Exit code is 0 only when every line
// passes.
//
// The three 100k-step pretrained generators are cached under --cache-dir,
// keyed by their full training configuration and seed, so reruns only pay
// for the criterion bodies. The cache does NOT key on the code version:
// delete the directory after changing any training code.
//
//   fav_acceptance [--cache-dir DIR] [--work-dir DIR] [--only 4,5,m2]
//
// --only runs a subset while iterating; the ctest invocation never passes it.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fav/train.hpp"

using namespace fav;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Plumbing.

struct Args {
  std::string cache_dir = "acceptance-cache";
  std::string work_dir = "acceptance-work";
  std::set<std::string> only;  // empty = everything
};

struct Line {
  std::string tag;  // "1".."12", "M1"..
  bool pass = false;
  double sec = 0.0;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  require(out.good(), "cannot write " + path);
}

// Commands narrate through printing sinks; keep the gate's output readable by
// silencing stdout around them.
class MuteStdout {
  int saved_ = -1;

 public:
  MuteStdout() {
    std::fflush(stdout);
    saved_ = dup(1);
    int nul = open("/dev/null", O_WRONLY);
    if (nul >= 0) {
      dup2(nul, 1);
      close(nul);
    }
  }
  ~MuteStdout() {
    if (saved_ >= 0) {
      std::fflush(stdout);
      dup2(saved_, 1);
      close(saved_);
    }
  }
};

// ---------------------------------------------------------------------------
// Pinned experiment constants. The spec-side numbers (particle counts, step
// sizes, tolerances) live inline at each criterion; these are the
// implementation-choice knobs, calibrated once and frozen.

constexpr double kSvgdKernelTau = 0.5;  // SVGD transport kernel, tau = 2 s^2
constexpr double kFtTau = 0.125;        // fine-tuning transport/KDE width
constexpr double kMmdTau = 2.0;         // MMD comparison kernel
const std::vector<double> kPolicyTauGrid = {0.005, 0.02, 0.08, 0.32};

// ---------------------------------------------------------------------------
// Small-sample KL estimate (the public estimator refuses n < 1000, which the
// 512-particle criteria need). Both sides are smoothed by the same
// Scott's-rule kernel: the cloud by a leave-one-out KDE, the target by a KDE
// over a large exact rejection sample. Matching bandwidths cancel the plug-in
// bias to leading order, same construction as the library estimator but with
// a sample-based reference instead of a quadrature grid.

Vec log_kde_density(const Batch& q, const Batch& ref, double h) {
  const Index n = q.rows();
  const Index m = ref.rows();
  const double inv = 1.0 / (2.0 * h * h);
  Vec run_max = Vec::Constant(n, -1e300);
  Vec run_sum = Vec::Zero(n);
  Vec qs = q.rowwise().squaredNorm();
  const Index blk = 8192;
  for (Index j0 = 0; j0 < m; j0 += blk) {
    const Index b = std::min(blk, m - j0);
    Matrix logits = 2.0 * (q * ref.middleRows(j0, b).transpose());
    logits.colwise() -= qs;
    logits.rowwise() -= ref.middleRows(j0, b).rowwise().squaredNorm().transpose();
    logits *= inv;  // -(||q_i - r_j||^2) / (2 h^2)
    for (Index i = 0; i < n; ++i) {
      const double bm = logits.row(i).maxCoeff();
      const double nm = std::max(run_max(i), bm);
      run_sum(i) = run_sum(i) * std::exp(run_max(i) - nm) +
                   (logits.row(i).array() - nm).exp().sum();
      run_max(i) = nm;
    }
  }
  return (run_sum.array().log() + run_max.array() -
          std::log(static_cast<double>(m)) - std::log(2.0 * M_PI * h * h))
      .matrix();
}

double dual_kde_kl(const Batch& x, const Batch& exact_ref) {
  const Index n = x.rows();
  const double h = scott_bandwidth(x);
  const double inv = 1.0 / (2.0 * h * h);
  Matrix logits = 2.0 * (x * x.transpose());
  Vec xs = x.rowwise().squaredNorm();
  logits.colwise() -= xs;
  logits.rowwise() -= xs.transpose();
  logits *= inv;
  logits.diagonal().setConstant(-1e300);  // leave-one-out
  Vec lp(n);
  for (Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    lp(i) = mx + std::log((logits.row(i).array() - mx).exp().sum()) -
            std::log(static_cast<double>(n - 1)) -
            std::log(2.0 * M_PI * h * h);
  }
  return (lp - log_kde_density(x, exact_ref, h)).mean();
}

// ---------------------------------------------------------------------------
// Shared fixtures, built lazily so a --only subset pays only for what it
// touches. Fine-tuning and policy runs are memoized because several criteria
// reuse the same runs (5 feeds 6/7/8; 10's default-tau rows are 11).

struct FtSummary {
  double kl_pre = 0.0;
  double reward_pre = 0.0;
  double kl_post = 0.0;
  double reward_post = 0.0;
  double min_mass = 0.0;
  Checkpoint model;
};

struct PolSummary {
  double mean_q = 0.0;
  double in_support = 0.0;
  double dataset_q = 0.0;
};

struct Fx {
  Args args;
  GaussianMixture mix = eight_gaussians();
  SoftClusterReward rw{eight_gaussians().centers};
  RewardOracle oracle = make_oracle(rw);

  bool have_truth = false;
  TiltedTarget t1;  // beta = 1 toy target
  Batch truth;      // 2e5 exact rejection draws from t1
  double truth_reward = 0.0;

  std::map<std::string, Checkpoint> pre;
  std::map<std::string, FtSummary> ft;
  std::map<std::string, PolSummary> pol;
};

void ensure_truth(Fx& fx) {
  if (fx.have_truth) return;
  fx.t1 = make_tilted(fx.mix, fx.rw, 1.0);
  RngStream rng(90210);
  fx.truth = tilted_sample_rejection(fx.t1, 200000, rng);
  fx.truth_reward = mean_reward(fx.truth, fx.oracle);
  fx.have_truth = true;
}

// Pretrained generator for `kind`, from the cache when the key matches.
const Checkpoint& cached_pretrain(Fx& fx, const std::string& kind) {
  auto it = fx.pre.find(kind);
  if (it != fx.pre.end()) return it->second;

  PretrainSection p;
  p.kind = kind;
  const std::uint64_t seed = 1;
  const std::string key =
      fmt("kind=%s steps=%lld batch=%lld pool=%lld sample_steps=%lld seed=%llu",
          kind.c_str(), static_cast<long long>(p.steps),
          static_cast<long long>(p.batch), static_cast<long long>(p.pool),
          static_cast<long long>(p.sample_steps),
          static_cast<unsigned long long>(seed));
  const fs::path ck_path = fs::path(fx.args.cache_dir) / ("pre-" + kind + ".ckpt");
  const fs::path key_path = fs::path(fx.args.cache_dir) / ("pre-" + kind + ".key");

  if (fs::exists(ck_path) && fs::exists(key_path) &&
      slurp(key_path.string()) == key) {
    Checkpoint ck = load_checkpoint(ck_path.string());
    std::printf("    [cache] %s: reused %s\n", kind.c_str(),
                ck_path.string().c_str());
    return fx.pre.emplace(kind, std::move(ck)).first->second;
  }

  std::printf("    [cache] %s: training %lld steps (cold cache)...\n",
              kind.c_str(), static_cast<long long>(p.steps));
  std::fflush(stdout);
  const auto t0 = Clock::now();
  EvalSection ev;
  ev.every = p.steps;  // records at step 0 and the end only
  ev.n = 10000;
  PretrainOutcome out = pretrain_model(p, ev, seed, [](const MetricsRecord&) {});
  fs::create_directories(fx.args.cache_dir);
  save_checkpoint(ck_path.string(), out.model);
  spit(key_path.string(), key);
  std::printf("    [cache] %s: trained in %.0fs (final kl %.3f)\n", kind.c_str(),
              since(t0), out.final_record.kl_nats);
  std::fflush(stdout);
  return fx.pre.emplace(kind, std::move(out.model)).first->second;
}

// One fine-tuning run at the acceptance defaults (5000 steps, 256/256
// batches), evaluated at n = 10000 where the KL estimator's calibrated bias
// bound holds. Memoized across criteria.
const FtSummary& ft_run(Fx& fx, const std::string& kind, double beta,
                        const std::string& ablate, bool zeroth_order,
                        std::uint64_t seed) {
  const std::string key = fmt("%s b=%g a=%s zo=%d s=%llu", kind.c_str(), beta,
                              ablate.c_str(), zeroth_order ? 1 : 0,
                              static_cast<unsigned long long>(seed));
  auto it = fx.ft.find(key);
  if (it != fx.ft.end()) return it->second;

  FinetuneSection f;
  f.beta = beta;
  f.tau = kFtTau;
  f.ablate = ablate;
  f.zeroth_order = zeroth_order;
  EvalSection ev;
  ev.every = f.steps;
  ev.n = 10000;
  FinetuneOutcome out = finetune_model(cached_pretrain(fx, kind), f, ev, seed,
                                       [](const MetricsRecord&) {});
  FtSummary s;
  s.kl_pre = out.pre_record.kl_nats;
  s.reward_pre = out.pre_record.mean_reward;
  s.kl_post = out.final_record.kl_nats;
  s.reward_post = out.final_record.mean_reward;
  s.min_mass = out.final_record.mode_masses.minCoeff();
  s.model = std::move(out.model);
  return fx.ft.emplace(key, std::move(s)).first->second;
}

// One policy-extraction run; everything not named here stays at defaults.
const PolSummary& pol_run(Fx& fx, double beta, double tau, bool adaptive,
                          std::uint64_t seed) {
  const std::string key = fmt("b=%g t=%g ad=%d s=%llu", beta, tau,
                              adaptive ? 1 : 0,
                              static_cast<unsigned long long>(seed));
  auto it = fx.pol.find(key);
  if (it != fx.pol.end()) return it->second;

  PolicySection p;
  p.beta = beta;
  p.tau = tau;
  p.adaptive_bandwidth = adaptive;
  EvalSection ev;
  ev.every = p.steps;
  ev.n = 4096;
  PolicyRunOutcome out = run_policy(p, ev, seed, [](const MetricsRecord&) {});
  PolSummary s;
  s.mean_q = out.final_eval.mean_q;
  s.in_support = out.final_eval.in_support;
  s.dataset_q = out.data_coverage.mean_q;
  return fx.pol.emplace(key, std::move(s)).first->second;
}

// A plain-MLP generator over the SampleGraph seam, for the amortization
// gradient check.
GeneratorHandle mlp_generator(MlpParams& params) {
  GeneratorHandle g;
  g.dim = params.config.output_dim;
  g.params = &params;
  g.sample_graph = [&params](Index n, RngStream& rng) {
    auto ws = std::make_shared<MlpWorkspace>();
    Batch eps = rng.normal_mat(n, params.config.input_dim);
    SampleGraph sg;
    sg.x = mlp_forward(params, eps, ws.get());
    sg.backward = [&params, ws](const Eigen::Ref<const Batch>& dY) {
      GradBundle gb = grad_zeros_like(params);
      mlp_backward(params, *ws, dY, gb);
      return gb;
    };
    return sg;
  };
  return g;
}

// Walk a few representative coordinates of a parameter set / grad bundle.
struct Coord {
  double* param;
  const double* grad;
};
Coord probe_coord(MlpParams& p, const GradBundle& g, int probe) {
  const size_t layer = static_cast<size_t>(probe) % p.W.size();
  switch (probe % 3) {
    case 0:
      return {&p.W[layer](0, 0), &g.dW[layer](0, 0)};
    case 1: {
      const Index r = p.W[layer].rows() - 1;
      const Index c = p.W[layer].cols() - 1;
      return {&p.W[layer](r, c), &g.dW[layer](r, c)};
    }
    default:
      return {&p.b[layer](0), &g.db[layer](0)};
  }
}

double rel_err(double got, double want) {
  const double scale = std::max(std::abs(want), 1e-6);
  return std::abs(got - want) / scale;
}

// ---------------------------------------------------------------------------
// 1. Reverse-mode gradients of every training loss match central finite
//    differences to rel err < 1e-4 on width-8 nets; JVP matches FD to 1e-5.

Line c1(Fx& fx) {
  const auto t0 = Clock::now();
  const double h = 1e-5;
  double worst = 0.0;

  {  // VAE: negative ELBO with frozen noise is a pure function of params.
    RngStream rng(101);
    VaeModel m = vae_init(rng, 8, 2, 3);
    RngStream drw(102);
    Batch x = mixture_sample(fx.mix, 12, drw);
    Batch eps = drw.normal_mat(12, 3);
    GradBundle ge = grad_zeros_like(m.encoder);
    GradBundle gd = grad_zeros_like(m.decoder);
    (void)vae_loss(m, x, eps, &ge, &gd);
    for (int probe = 0; probe < 12; ++probe) {
      const bool enc = probe % 2 == 0;
      VaeModel mp = m, mq = m;
      Coord cp = probe_coord(enc ? mp.encoder : mp.decoder, enc ? ge : gd,
                             probe / 2);
      Coord cq = probe_coord(enc ? mq.encoder : mq.decoder, enc ? ge : gd,
                             probe / 2);
      *cp.param += h;
      *cq.param -= h;
      const double fd =
          (vae_loss(mp, x, eps).loss - vae_loss(mq, x, eps).loss) / (2 * h);
      worst = std::max(worst, rel_err(*cp.grad, fd));
    }
  }

  {  // Drifting: regression onto frozen displaced targets.
    RngStream rng(111);
    DriftingModel m = drifting_init(rng, 8, 1, 6);
    RngStream drw(112);
    Batch eps = drw.normal_mat(10, 6);
    Batch data = mixture_sample(fx.mix, 24, drw);
    GradBundle g = grad_zeros_like(m.net);
    (void)drifting_loss(m, data, eps, &g);
    Batch x = mlp_forward(m.net, eps);
    DriftField f0 = drifting_field(x, data, x, m.tau_drift);
    Batch target = x + f0.v;
    auto loss_at = [&](const MlpParams& p) {
      return (mlp_forward(p, eps) - target).rowwise().squaredNorm().mean();
    };
    for (int probe = 0; probe < 9; ++probe) {
      MlpParams pp = m.net, pm = m.net;
      Coord cp = probe_coord(pp, g, probe);
      Coord cm = probe_coord(pm, g, probe);
      *cp.param += h;
      *cm.param -= h;
      worst = std::max(worst, rel_err(*cp.grad, (loss_at(pp) - loss_at(pm)) / (2 * h)));
    }
  }

  {  // MeanFlow: adaptively weighted MSE with frozen target and weights.
    RngStream rng(121);
    MeanFlowModel m = meanflow_init(rng, 8, 1);
    RngStream drw(122);
    const Index n = 8;
    Batch x0 = drw.normal_mat(n, 2);
    Batch x1 = mixture_sample(fx.mix, n, drw);
    Vec t(n), r(n);
    for (Index i = 0; i < n; ++i) {
      t(i) = 0.15 + 0.8 * drw.uniform();
      r(i) = t(i) * drw.uniform();
    }
    GradBundle g = grad_zeros_like(m.net);
    (void)meanflow_loss(m, x0, x1, t, r, &g);

    Batch v = x1 - x0;
    Batch xt = x0 + (v.array().colwise() * t.array()).matrix();
    Matrix X(n, 4);
    X.leftCols(2) = xt;
    X.col(2) = t;
    X.col(3) = t - r;
    Matrix dX(n, 4);
    dX.leftCols(2) = v;
    dX.col(2).setOnes();
    dX.col(3).setOnes();
    auto [u0, dudt] = mlp_jvp(m.net, X, dX);
    Vec gap = t - r;
    Batch u_star = v - (dudt.array().colwise() * gap.array()).matrix();
    Vec w = ((u0 - u_star).rowwise().squaredNorm().array() + 1e-2).matrix();
    auto loss_at = [&](const MlpParams& p) {
      Batch u = mlp_forward(p, X);
      return ((u - u_star).rowwise().squaredNorm().array() / w.array()).mean();
    };
    for (int probe = 0; probe < 9; ++probe) {
      MlpParams pp = m.net, pm = m.net;
      Coord cp = probe_coord(pp, g, probe);
      Coord cm = probe_coord(pm, g, probe);
      *cp.param += h;
      *cm.param -= h;
      worst = std::max(worst, rel_err(*cp.grad, (loss_at(pp) - loss_at(pm)) / (2 * h)));
    }
  }

  {  // Amortization: regression onto frozen transported targets.
    MlpConfig mc;
    mc.input_dim = 2;
    mc.output_dim = 2;
    mc.hidden_width = 8;
    mc.hidden_layers = 1;
    RngStream rng(131);
    MlpParams params = mlp_init(mc, rng);
    GeneratorHandle gen = mlp_generator(params);
    RngStream drw(132);
    Batch ref = mixture_sample(fx.mix, 64, drw);
    FavConfig cfg;
    cfg.n_gen = 32;
    cfg.n_ref = 64;
    cfg.tau = 0.5;
    cfg.beta = 1.0;
    RngStream step_rng(133);
    SampleGraph graph = gen.sample_graph(cfg.n_gen, step_rng);
    VelocityReport rep = fav_velocity(graph.x, ref, fx.oracle, cfg);
    Batch target = graph.x + rep.total;
    const double n = static_cast<double>(cfg.n_gen);
    GradBundle g = graph.backward(Batch(-(2.0 / n) * rep.total));
    RngStream replay(133);
    Batch eps = replay.normal_mat(cfg.n_gen, 2);
    auto loss_at = [&](const MlpParams& p) {
      return (target - mlp_forward(p, eps)).rowwise().squaredNorm().mean();
    };
    for (int probe = 0; probe < 9; ++probe) {
      MlpParams pp = params, pm = params;
      Coord cp = probe_coord(pp, g, probe);
      Coord cm = probe_coord(pm, g, probe);
      *cp.param += h;
      *cm.param -= h;
      worst = std::max(worst, rel_err(*cp.grad, (loss_at(pp) - loss_at(pm)) / (2 * h)));
    }
  }

  double jvp_err = 0.0;
  {  // Forward mode against a central difference along a random tangent.
    MlpConfig mc;
    mc.input_dim = 4;
    mc.output_dim = 2;
    mc.hidden_width = 8;
    mc.hidden_layers = 2;
    RngStream rng(141);
    MlpParams p = mlp_init(mc, rng);
    Batch X = rng.normal_mat(10, 4);
    Batch dX = rng.normal_mat(10, 4);
    auto [y, jvp] = mlp_jvp(p, X, dX);
    const double e = 1e-4;
    Batch fd = (mlp_forward(p, X + e * dX) - mlp_forward(p, X - e * dX)) / (2 * e);
    jvp_err = (jvp - fd).cwiseAbs().maxCoeff() /
              std::max(1.0, fd.cwiseAbs().maxCoeff());
  }

  const bool pass = worst < 1e-4 && jvp_err < 1e-5;
  return {"1", pass, since(t0),
          fmt("loss grads vs central FD: max rel err %.2e (< 1e-4); JVP %.2e (< 1e-5)",
              worst, jvp_err)};
}

// ---------------------------------------------------------------------------
// 2. KDE score consistency: error against the analytic smoothed-mixture score
//    decreases over N in {1e3, 1e4, 2e5} and ends below 0.05 at sigma = 0.2.

Line c2(Fx& fx) {
  const auto t0 = Clock::now();
  const double sigma = 0.2;
  RngStream rng(201);
  // In-support query points: mixture draws within 2 component-std of a
  // center (the ~86% bulk-mass region). Tail points are excluded because the
  // score estimate's variance scales like 1/density, not because the
  // estimator is wrong there.
  Batch points(200, 2);
  for (Index got = 0; got < 200;) {
    Batch cand = mixture_sample(fx.mix, 64, rng);
    for (Index i = 0; i < cand.rows() && got < 200; ++i) {
      const double d =
          (fx.mix.centers.rowwise() - cand.row(i)).rowwise().norm().minCoeff();
      if (d <= 2.0 * fx.mix.std_dev) points.row(got++) = cand.row(i);
    }
  }
  GaussianMixture sm = smoothed_mixture(fx.mix, sigma);
  Batch analytic = mixture_score_rows(sm, points);

  std::vector<Index> sizes = {1000, 10000, 200000};
  std::vector<double> errs;
  for (Index n : sizes) {
    Batch ref = mixture_sample(fx.mix, n, rng);
    KdeScore ks = kde_score(points, ref, sigma);
    errs.push_back((ks.score - analytic).rowwise().norm().mean());
  }
  const bool mono = errs[0] > errs[1] && errs[1] > errs[2];
  const bool small = errs[2] < 0.05;
  return {"2", mono && small, since(t0),
          fmt("mean L2 score error over N: %.3f -> %.3f -> %.4f (monotone, final < 0.05)",
              errs[0], errs[1], errs[2])};
}

// ---------------------------------------------------------------------------
// 3. The fused sample-only field equals the explicit field composed with the
//    KDE score, to 1e-12, on 100 random instances.

Line c3(Fx&) {
  const auto t0 = Clock::now();
  RngStream rng(301);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const Index ne = 2 + rng.uniform_index(12);
    const Index ns = 2 + rng.uniform_index(14);
    const Index nr = 2 + rng.uniform_index(20);
    const double sigma = 0.25 + rng.uniform();
    const double beta = 2.5 * rng.uniform();
    TermMask mask;
    mask.prior = rng.uniform() < 0.7;
    mask.reward = rng.uniform() < 0.7;
    mask.repulsive = rng.uniform() < 0.7;

    Batch ref = rng.normal_mat(nr, 2);
    Batch source = rng.normal_mat(ns, 2) * 0.8;
    Batch eval = rng.normal_mat(ne, 2) * 0.8;
    Batch rgrad = rng.normal_mat(ns, 2);

    KdeScore ks = kde_score(source, ref, sigma);
    KernelSpec kern{KernelFamily::gaussian_rbf, tau_from_sigma(sigma)};
    VelocityReport ex =
        stein_velocity_exact(eval, source, ks.score, rgrad, kern, beta, mask);
    VelocityReport kd =
        stein_velocity_kde(eval, source, ref, sigma, rgrad, beta, mask);
    worst = std::max({worst, (ex.total - kd.total).cwiseAbs().maxCoeff(),
                      (ex.prior - kd.prior).cwiseAbs().maxCoeff(),
                      (ex.reward - kd.reward).cwiseAbs().maxCoeff(),
                      (ex.repulsive - kd.repulsive).cwiseAbs().maxCoeff()});
  }
  return {"3", worst <= 1e-12, since(t0),
          fmt("fused vs explicit-of-KDE on 100 instances: max |diff| %.2e (<= 1e-12)",
              worst)};
}

// ---------------------------------------------------------------------------
// 4. SVGD oracle convergence: 512 particles, exact tilted score, eps = 0.05,
//    500 iterations; KL < 0.15 nats and all 8 mode masses > 0.02, averaged
//    over 4 seeds. KL at 512 particles comes from the dual-KDE estimate; its
//    own bias is measured on exact samples and printed alongside.

Line c4(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);

  SvgdConfig cfg;
  cfg.n_particles = 512;
  cfg.n_iters = 500;
  cfg.step_size = 0.05;
  cfg.kernel = {KernelFamily::gaussian_rbf, kSvgdKernelTau};

  double kl_acc = 0.0;
  Vec mass_acc = Vec::Zero(fx.mix.centers.rows());
  for (int s = 0; s < 4; ++s) {
    RngStream rng(401 + static_cast<std::uint64_t>(s));
    SvgdResult res = svgd_sample(fx.t1, cfg, rng);
    kl_acc += dual_kde_kl(res.particles, fx.truth);
    mass_acc += mode_masses(res.particles, fx.mix.centers);
  }
  const double kl = kl_acc / 4.0;
  const double min_mass = (mass_acc / 4.0).minCoeff();

  // Estimator self-check: exact 512-sample draws should read near zero.
  double bias = 0.0;
  RngStream brng(451);
  for (int rep = 0; rep < 4; ++rep)
    bias += dual_kde_kl(tilted_sample_rejection(fx.t1, 512, brng), fx.truth);
  bias /= 4.0;

  const bool pass = kl < 0.15 && min_mass > 0.02;
  return {"4", pass, since(t0),
          fmt("4-seed mean KL %.3f nats (< 0.15; estimator bias on exact draws %+.3f), min mode mass %.3f (> 0.02)",
              kl, bias, min_mass)};
}

// ---------------------------------------------------------------------------
// 5. Toy-study reproduction: for each generator family, fine-tuning halves
//    the KL to the tilted target and lands mean reward within 0.05 of the
//    rejection-sampler truth, averaged over 4 seeds.

Line c5(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);
  std::string detail = fmt("truth reward %.3f |", fx.truth_reward);
  bool pass = true;
  for (const std::string kind : {"vae", "drifting", "meanflow"}) {
    double pre = 0.0, post = 0.0, rew = 0.0;
    for (std::uint64_t s = 1; s <= 4; ++s) {
      const FtSummary& r = ft_run(fx, kind, 1.0, "", false, s);
      pre += r.kl_pre;
      post += r.kl_post;
      rew += r.reward_post;
    }
    pre /= 4.0;
    post /= 4.0;
    rew /= 4.0;
    const bool ok = post <= 0.5 * pre && std::abs(rew - fx.truth_reward) <= 0.05;
    pass = pass && ok;
    detail += fmt(" %s KL %.3f->%.3f r %.3f%s", kind.c_str(), pre, post, rew,
                  ok ? "" : " [FAIL]");
  }
  return {"5", pass, since(t0), detail};
}

// ---------------------------------------------------------------------------
// 6. Amortization fidelity: squared MMD between fine-tuned samples and SVGD
//    oracle particles stays under 3x the oracle-vs-oracle noise floor.

Line c6(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);

  AnyModel model = AnyModel::from_checkpoint(ft_run(fx, "meanflow", 1.0, "", false, 1).model);
  RngStream srng(601);
  Batch fav_samples = model.sample(4096, srng, 1);

  SvgdConfig cfg;
  cfg.n_particles = 4096;
  cfg.n_iters = 500;
  cfg.step_size = 0.05;
  cfg.kernel = {KernelFamily::gaussian_rbf, kSvgdKernelTau};
  RngStream ra(611), rb(612);
  Batch oracle_a = svgd_sample(fx.t1, cfg, ra).particles;
  Batch oracle_b = svgd_sample(fx.t1, cfg, rb).particles;

  KernelSpec mk{KernelFamily::gaussian_rbf, kMmdTau};
  const double gap = mmd(fav_samples, oracle_a, mk);
  const double floor = mmd(oracle_a, oracle_b, mk);
  const bool pass = gap < 3.0 * floor;
  return {"6", pass, since(t0),
          fmt("squared MMD fav-vs-oracle %.2e vs noise floor %.2e (< 3x)", gap,
              floor)};
}

// ---------------------------------------------------------------------------
// 7. Ablation contract on MeanFlow (the family the paper ablates): dropping
//    the reward term leaves reward at the pretrained level (within 2 SE);
//    dropping the prior term trades diversity for reward.

Line c7(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);

  auto mean_of = [](const std::vector<double>& v) {
    double a = 0.0;
    for (double x : v) a += x;
    return a / static_cast<double>(v.size());
  };
  auto var_of = [&](const std::vector<double>& v) {
    const double m = mean_of(v);
    double a = 0.0;
    for (double x : v) a += (x - m) * (x - m);
    return a / static_cast<double>(v.size() - 1);
  };

  std::vector<double> pre_r, wor_r, full_r, wop_r, full_m, wop_m;
  for (std::uint64_t s = 1; s <= 4; ++s) {
    const FtSummary& full = ft_run(fx, "meanflow", 1.0, "", false, s);
    const FtSummary& wor = ft_run(fx, "meanflow", 1.0, "reward", false, s);
    const FtSummary& wop = ft_run(fx, "meanflow", 1.0, "prior", false, s);
    pre_r.push_back(full.reward_pre);
    full_r.push_back(full.reward_post);
    full_m.push_back(full.min_mass);
    wor_r.push_back(wor.reward_post);
    wop_r.push_back(wop.reward_post);
    wop_m.push_back(wop.min_mass);
  }
  const double se =
      std::sqrt(var_of(pre_r) / 4.0 + var_of(wor_r) / 4.0);
  const double drift = std::abs(mean_of(wor_r) - mean_of(pre_r));
  const bool flat = drift <= 2.0 * se;
  const bool greedy = mean_of(wop_r) > mean_of(full_r) &&
                      mean_of(wop_m) < mean_of(full_m);
  return {"7", flat && greedy, since(t0),
          fmt("w/o reward drift %.3f vs 2SE %.3f; w/o prior reward %.3f > full %.3f, min mass %.3f < %.3f",
              drift, 2.0 * se, mean_of(wop_r), mean_of(full_r), mean_of(wop_m),
              mean_of(full_m))};
}

// ---------------------------------------------------------------------------
// 8. Sensitivity monotonicity over beta in {0.5, 1, 2} at fixed tau:
//    4-seed mean reward non-decreasing, min mode mass non-increasing.

Line c8(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);
  std::vector<double> rewards, masses;
  for (double beta : {0.5, 1.0, 2.0}) {
    double r = 0.0, m = 0.0;
    for (std::uint64_t s = 1; s <= 4; ++s) {
      const FtSummary& ft = ft_run(fx, "meanflow", beta, "", false, s);
      r += ft.reward_post;
      m += ft.min_mass;
    }
    rewards.push_back(r / 4.0);
    masses.push_back(m / 4.0);
  }
  const bool mono = rewards[0] <= rewards[1] && rewards[1] <= rewards[2] &&
                    masses[0] >= masses[1] && masses[1] >= masses[2];
  return {"8", mono, since(t0),
          fmt("beta {0.5,1,2}: reward %.3f/%.3f/%.3f non-decreasing, min mass %.3f/%.3f/%.3f non-increasing",
              rewards[0], rewards[1], rewards[2], masses[0], masses[1],
              masses[2])};
}

// ---------------------------------------------------------------------------
// 9. Zeroth-order path: two-point estimate of a quadratic reward's gradient
//    within 5% at K = 4096; value-only fine-tuning with K = 64 still cuts KL
//    by >= 30% in the MeanFlow setting.

Line c9(Fx& fx) {
  const auto t0 = Clock::now();
  ensure_truth(fx);

  const Vec c = (Vec(2) << 0.4, -0.3).finished();
  const Vec diag = (Vec(2) << 0.7, 1.3).finished();
  auto value = [c, diag](const Eigen::Ref<const Vec>& x) {
    const Vec d = x - c;
    return -(diag.array() * d.array().square()).sum();
  };
  RewardOracle zo = zeroth_order_oracle(value, 1e-3, 4096, 901);
  RngStream prng(902);
  double err = 0.0;
  for (int i = 0; i < 20; ++i) {
    Vec x = 1.5 * prng.normal_mat(1, 2).row(0).transpose();
    Vec got = zo.grad(x);
    Vec want = -2.0 * (diag.array() * (x - c).array()).matrix();
    err += (got - want).norm() / want.norm();
  }
  err /= 20.0;

  double pre = 0.0, post = 0.0;
  for (std::uint64_t s = 1; s <= 4; ++s) {
    const FtSummary& r = ft_run(fx, "meanflow", 1.0, "", true, s);
    pre += r.kl_pre;
    post += r.kl_post;
  }
  pre /= 4.0;
  post /= 4.0;

  const bool pass = err < 0.05 && post <= 0.7 * pre;
  return {"9", pass, since(t0),
          fmt("quadratic grad rel err %.3f (< 0.05); K=64 fine-tune KL %.3f->%.3f (>= 30%% drop)",
              err, pre, post)};
}

// ---------------------------------------------------------------------------
// 10. Scott's rule exactness, plus the adaptive-bandwidth policy run landing
//     within 0.05 of the best fixed-tau grid point.

Line c10(Fx& fx) {
  const auto t0 = Clock::now();

  // Alternating +-1 columns have population std exactly 1.
  Batch X(256, 2);
  for (Index i = 0; i < 256; ++i) {
    X(i, 0) = (i % 2 == 0) ? 1.0 : -1.0;
    X(i, 1) = (i % 2 == 0) ? -1.0 : 1.0;
  }
  const double h = scott_bandwidth(X);
  const double want_h = std::pow(256.0, -1.0 / 6.0);
  const double exact_err = std::max(std::abs(h - want_h),
                                    std::abs(tau_from_sigma(h) - 2.0 * want_h * want_h));

  double best_q = -1e300, best_tau = 0.0;
  for (double tau : kPolicyTauGrid) {
    double q = 0.0;
    for (std::uint64_t s = 1; s <= 4; ++s) q += pol_run(fx, 2.0, tau, false, s).mean_q;
    q /= 4.0;
    if (q > best_q) {
      best_q = q;
      best_tau = tau;
    }
  }
  double ad_q = 0.0;
  for (std::uint64_t s = 1; s <= 4; ++s)
    ad_q += pol_run(fx, 2.0, 0.02, true, s).mean_q;
  ad_q /= 4.0;

  const bool pass = exact_err <= 1e-12 && ad_q >= best_q - 0.05;
  return {"10", pass, since(t0),
          fmt("scott exactness err %.1e (<= 1e-12); adaptive mean Q %.3f vs best fixed %.3f (tau %g)",
              exact_err, ad_q, best_q, best_tau)};
}

// ---------------------------------------------------------------------------
// 11. Policy extraction: mean Q beats the dataset mean by 0.05 with >= 90%
//     in-support actions at beta = 2, averaged over 4 seeds.

Line c11(Fx& fx) {
  const auto t0 = Clock::now();
  double q = 0.0, in_sup = 0.0, data_q = 0.0;
  for (std::uint64_t s = 1; s <= 4; ++s) {
    const PolSummary& p = pol_run(fx, 2.0, 0.02, false, s);
    q += p.mean_q;
    in_sup += p.in_support;
    data_q += p.dataset_q;
  }
  q /= 4.0;
  in_sup /= 4.0;
  data_q /= 4.0;
  const bool pass = q >= data_q + 0.05 && in_sup >= 0.9;
  return {"11", pass, since(t0),
          fmt("mean Q %.3f vs dataset %.3f (+%.3f >= 0.05); in-support %.3f (>= 0.9)",
              q, data_q, q - data_q, in_sup)};
}

// ---------------------------------------------------------------------------
// 12. Determinism: each command rerun with identical config and seed yields a
//     byte-identical metrics.jsonl.

Line c12(Fx& fx) {
  const auto t0 = Clock::now();
  const fs::path work = fs::path(fx.args.work_dir) / "determinism";
  fs::remove_all(work);
  fs::create_directories(work);

  auto run_pair = [&](const std::string& name, ExperimentConfig cfg,
                      int (*cmd)(const ExperimentConfig&)) {
    MuteStdout mute;
    cfg.out = (work / (name + "-a")).string();
    require(cmd(cfg) == 0, name + " run a failed");
    std::string a = slurp(cfg.out + "/metrics.jsonl");
    cfg.out = (work / (name + "-b")).string();
    require(cmd(cfg) == 0, name + " run b failed");
    return a == slurp(cfg.out + "/metrics.jsonl");
  };

  ExperimentConfig base;
  base.seed = 77;
  base.eval.every = 200;
  base.eval.n = 1024;

  ExperimentConfig pre = base;
  pre.pretrain.kind = "vae";
  pre.pretrain.steps = 400;
  pre.pretrain.batch = 32;
  pre.pretrain.pool = 4000;
  const bool ok_pre = run_pair("pretrain", pre, &cmd_pretrain);

  ExperimentConfig ft = base;
  ft.finetune.checkpoint = (work / "pretrain-a" / "model.ckpt").string();
  ft.finetune.steps = 60;
  ft.finetune.n_gen = 64;
  ft.finetune.n_ref = 64;
  ft.eval.every = 30;
  const bool ok_ft = run_pair("finetune", ft, &cmd_finetune);

  ExperimentConfig sv = base;
  sv.svgd.particles = 128;
  sv.svgd.iters = 60;
  const bool ok_sv = run_pair("svgd", sv, &cmd_svgd);

  ExperimentConfig po = base;
  po.policy.steps = 40;
  po.policy.n_states = 100;
  po.policy.actions_per_state = 4;
  po.policy.state_batch = 8;
  po.policy.particles = 4;
  po.policy.k_neighbors = 8;
  po.eval.every = 20;
  const bool ok_po = run_pair("policy-extract", po, &cmd_policy);

  const bool pass = ok_pre && ok_ft && ok_sv && ok_po;
  return {"12", pass, since(t0),
          fmt("rerun metrics.jsonl byte-identical: pretrain %s, finetune %s, svgd %s, policy-extract %s",
              ok_pre ? "yes" : "NO", ok_ft ? "yes" : "NO", ok_sv ? "yes" : "NO",
              ok_po ? "yes" : "NO")};
}

// ---------------------------------------------------------------------------
// Module-level checks that need the cached desk-scale models; same pass/fail
// contract as the criteria.

// Drifting pretraining keeps all eight modes alive (mass >= 0.05 each).
Line m1(Fx& fx) {
  const auto t0 = Clock::now();
  AnyModel m = AnyModel::from_checkpoint(cached_pretrain(fx, "drifting"));
  RngStream rng(1001);
  Vec mass = mode_masses(m.sample(10000, rng), fx.mix.centers);
  return {"M1", mass.minCoeff() >= 0.05, since(t0),
          fmt("drifting pretrain mode masses: min %.3f (>= 0.05)", mass.minCoeff())};
}

// MeanFlow jump sampler: 2-step and 16-step samples both close to the data.
Line m2(Fx& fx) {
  const auto t0 = Clock::now();
  AnyModel m = AnyModel::from_checkpoint(cached_pretrain(fx, "meanflow"));
  TiltedTarget t0_target = make_tilted(fx.mix, fx.rw, 0.0);
  RngStream r2(1011), r16(1012);
  const double kl2 = kl_to_target(m.sample(10000, r2, 2), t0_target);
  const double kl16 = kl_to_target(m.sample(10000, r16, 16), t0_target);
  return {"M2", kl2 < 0.2 && kl16 < 0.2, since(t0),
          fmt("meanflow sampler KL to data: 2-step %.3f, 16-step %.3f (both < 0.2)",
              kl2, kl16)};
}

// beta = 0 fine-tuning is a no-op up to estimator tolerance: the tuned
// model's samples stay close (in KL) to the pretrained model's own law.
Line m3(Fx& fx) {
  const auto t0 = Clock::now();
  const Checkpoint& pre_ck = cached_pretrain(fx, "meanflow");
  const FtSummary& ft = ft_run(fx, "meanflow", 0.0, "", false, 1);

  AnyModel pre_m = AnyModel::from_checkpoint(pre_ck);
  AnyModel post_m = AnyModel::from_checkpoint(ft.model);
  RngStream ra(1021), rb(1022);
  Batch pre_big(200000, 2);  // drawn in chunks to bound forward-pass memory
  for (Index i = 0; i < 10; ++i)
    pre_big.middleRows(i * 20000, 20000) = pre_m.sample(20000, ra, 1);
  const double kl = dual_kde_kl(post_m.sample(2048, rb, 1), pre_big);
  return {"M3", std::abs(kl) < 0.1, since(t0),
          fmt("beta=0 fine-tune vs pretrained law: |KL| %.3f (< 0.1)", std::abs(kl))};
}

// beta = 0 policy extraction reproduces the behavior conditional: per-state
// MMD to the dataset actions beats an untrained policy's.
Line m4(Fx& fx) {
  const auto t0 = Clock::now();

  PolicySection p;
  p.beta = 0.0;
  EvalSection ev;
  ev.every = p.steps;
  ev.n = 4096;
  PolicyRunOutcome out = run_policy(p, ev, 5, [](const MetricsRecord&) {});
  PolicyModel trained = policy_from_checkpoint(out.model);
  RngStream irng(1031);
  PolicyModel untrained = policy_init(irng);

  const BanditDataset& ds = out.dataset;
  const Index aps = p.actions_per_state;
  const Index n_states = ds.states.rows() / aps;
  KernelSpec mk{KernelFamily::gaussian_rbf, 0.02};
  RngStream arng(1032);
  double mmd_tr = 0.0, mmd_un = 0.0;
  const Index probe_states = 50;
  for (Index g = 0; g < probe_states; ++g) {
    const Index st = g * (n_states / probe_states);
    Batch rep(64, 2);
    rep.rowwise() = ds.states.row(st * aps);
    Batch data_actions = ds.actions.middleRows(st * aps, aps);
    mmd_tr += mmd(policy_actions(trained, rep, arng), data_actions, mk);
    mmd_un += mmd(policy_actions(untrained, rep, arng), data_actions, mk);
  }
  mmd_tr /= static_cast<double>(probe_states);
  mmd_un /= static_cast<double>(probe_states);
  return {"M4", mmd_tr < mmd_un, since(t0),
          fmt("beta=0 policy per-state MMD %.4f < untrained %.4f", mmd_tr, mmd_un)};
}

// With beta = 0 the tilted target is the plain mixture, and SVGD alone should
// reconstruct it: 512 particles end within the same KL bound as criterion 4.
Line m6(Fx& fx) {
  const auto t0 = Clock::now();
  TiltedTarget flat = make_tilted(fx.mix, fx.rw, 0.0);
  SvgdConfig cfg;
  cfg.n_particles = 512;
  cfg.n_iters = 500;
  cfg.step_size = 0.05;
  cfg.kernel = {KernelFamily::gaussian_rbf, kSvgdKernelTau};
  RngStream rng(1041), ref_rng(1042);
  SvgdResult res = svgd_sample(flat, cfg, rng);
  const double kl = dual_kde_kl(res.particles, mixture_sample(fx.mix, 200000, ref_rng));
  return {"M6", kl < 0.15, since(t0),
          fmt("beta=0 svgd KL to the mixture %.3f (< 0.15)", kl)};
}

// Conservatism across beta in {0.5, 2, 5}: in-support stays >= 0.8 while
// mean Q is non-decreasing in beta (4 seeds each).
Line m5(Fx& fx) {
  const auto t0 = Clock::now();
  std::vector<double> qs, sups;
  for (double beta : {0.5, 2.0, 5.0}) {
    double q = 0.0, sup = 0.0;
    for (std::uint64_t s = 1; s <= 4; ++s) {
      const PolSummary& p = pol_run(fx, beta, 0.02, false, s);
      q += p.mean_q;
      sup += p.in_support;
    }
    qs.push_back(q / 4.0);
    sups.push_back(sup / 4.0);
  }
  const bool pass = sups[0] >= 0.8 && sups[1] >= 0.8 && sups[2] >= 0.8 &&
                    qs[0] <= qs[1] && qs[1] <= qs[2];
  return {"M5", pass, since(t0),
          fmt("beta {0.5,2,5}: mean Q %.3f/%.3f/%.3f non-decreasing, in-support %.2f/%.2f/%.2f (>= 0.8)",
              qs[0], qs[1], qs[2], sups[0], sups[1], sups[2])};
}

}  // namespace

int main(int argc, char** argv) {
  Fx fx;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      require(i + 1 < argc, a + " needs a value");
      return argv[++i];
    };
    if (a == "--cache-dir") {
      fx.args.cache_dir = next();
    } else if (a == "--work-dir") {
      fx.args.work_dir = next();
    } else if (a == "--only") {
      std::stringstream ss(next());
      std::string tok;
      while (std::getline(ss, tok, ',')) fx.args.only.insert(tok);
    } else {
      std::fprintf(stderr,
                   "usage: fav_acceptance [--cache-dir D] [--work-dir D] "
                   "[--only 1,4,m2]\n");
      return 2;
    }
  }
  fs::create_directories(fx.args.cache_dir);
  fs::create_directories(fx.args.work_dir);

  struct Entry {
    std::string tag;
    Line (*run)(Fx&);
  };
  const std::vector<Entry> entries = {
      {"1", c1},   {"2", c2},   {"3", c3},   {"4", c4},   {"5", c5},
      {"6", c6},   {"7", c7},   {"8", c8},   {"9", c9},   {"10", c10},
      {"11", c11}, {"12", c12}, {"m1", m1},  {"m2", m2},  {"m3", m3},
      {"m4", m4},  {"m5", m5},  {"m6", m6}};

  const auto t_all = Clock::now();
  std::printf("acceptance gate (cache %s)\n", fx.args.cache_dir.c_str());
  int ran = 0, passed = 0;
  for (const Entry& e : entries) {
    if (!fx.args.only.empty() && !fx.args.only.count(e.tag)) continue;
    ++ran;
    Line line;
    const auto t0 = Clock::now();
    try {
      line = e.run(fx);
    } catch (const std::exception& ex) {
      line = {e.tag, false, since(t0), fmt("exception: %s", ex.what())};
    }
    if (line.pass) ++passed;
    std::printf("[%3s] %s %7.1fs  %s\n", line.tag.c_str(),
                line.pass ? "PASS" : "FAIL", line.sec, line.detail.c_str());
    std::fflush(stdout);
  }
  const bool all = passed == ran;
  std::printf("acceptance: %d/%d passed in %.0fs%s\n", passed, ran,
              since(t_all),
              fx.args.only.empty() ? "" : " (subset via --only)");
  return all ? 0 : 1;
}
