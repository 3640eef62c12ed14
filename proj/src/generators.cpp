#include <cmath>
#include <memory>
#include <vector>

#include "fav/drifting.hpp"
#include "fav/meanflow.hpp"
#include "fav/vae.hpp"

namespace fav {

namespace {

MlpConfig net_config(Index in, Index out, Index width, Index layers) {
  MlpConfig c;
  c.input_dim = in;
  c.output_dim = out;
  c.hidden_width = width;
  c.hidden_layers = layers;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

VaeModel vae_init(RngStream& rng, Index hidden_width, Index hidden_layers,
                  Index d_z) {
  require(d_z >= 1, "vae: latent dimension must be positive");
  VaeModel m;
  m.d_z = d_z;
  m.encoder = mlp_init(net_config(2, 2 * d_z, hidden_width, hidden_layers), rng);
  m.decoder = mlp_init(net_config(d_z, 2, hidden_width, hidden_layers), rng);
  return m;
}

VaeLossStats vae_loss(const VaeModel& m, const Eigen::Ref<const Batch>& x,
                      const Eigen::Ref<const Batch>& eps, GradBundle* denc,
                      GradBundle* ddec) {
  require(x.cols() == 2, "vae: data must be 2-D");
  require(eps.rows() == x.rows() && eps.cols() == m.d_z,
          "vae: eps must be n x d_z");
  require(m.encoder.config.output_dim == 2 * m.d_z,
          "vae: encoder output dim != 2 d_z");
  const double n = static_cast<double>(x.rows());
  const double c = m.logvar_clamp;

  MlpWorkspace wse, wsd;
  Matrix enc = mlp_forward(m.encoder, x, &wse);
  Batch mu = enc.leftCols(m.d_z);
  Batch lv_raw = enc.rightCols(m.d_z);
  Batch lv = lv_raw.cwiseMax(-c).cwiseMin(c);
  Batch sd = (0.5 * lv).array().exp().matrix();
  Batch z = mu + sd.cwiseProduct(eps);
  Batch xhat = mlp_forward(m.decoder, z, &wsd);

  VaeLossStats stats;
  stats.recon = 0.5 * (x - xhat).squaredNorm() / n;
  stats.kl = 0.5 *
             (mu.array().square() + lv.array().exp() - 1.0 - lv.array()).sum() /
             n;
  stats.loss = stats.recon + m.beta_kl * stats.kl;
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("vae: non-finite loss");

  if (denc || ddec) {
    require(denc && ddec, "vae: need both gradient bundles or neither");
    Batch dxhat = (xhat - x) / n;
    Batch dz = mlp_backward(m.decoder, wsd, dxhat, *ddec);
    Batch dmu = dz + (m.beta_kl / n) * mu;
    // dz/dlogvar = (1/2) exp(logvar/2) eps; KL adds (beta/2n)(e^lv - 1).
    Batch dlv = dz.cwiseProduct(Batch(0.5 * sd.cwiseProduct(eps))) +
                (m.beta_kl / n) * 0.5 *
                    (lv.array().exp() - 1.0).matrix();
    // The clamp is flat outside [-c, c]: zero those entries.
    Batch mask =
        ((lv_raw.array() > -c) && (lv_raw.array() < c)).cast<double>().matrix();
    dlv = dlv.cwiseProduct(mask);
    Matrix dEnc(x.rows(), 2 * m.d_z);
    dEnc << dmu, dlv;
    mlp_backward(m.encoder, wse, dEnc, *denc);
  }
  return stats;
}

VaeLossStats vae_loss(const VaeModel& m, const Eigen::Ref<const Batch>& x,
                      RngStream& rng, GradBundle* denc, GradBundle* ddec) {
  Batch eps = rng.normal_mat(x.rows(), m.d_z);
  return vae_loss(m, x, eps, denc, ddec);
}

VaeLossStats vae_train_step(VaeModel& m, const Eigen::Ref<const Batch>& x,
                            const OptConfig& ocfg, OptState& opt,
                            RngStream& rng) {
  GradBundle ge = grad_zeros_like(m.encoder);
  GradBundle gd = grad_zeros_like(m.decoder);
  VaeLossStats stats = vae_loss(m, x, rng, &ge, &gd);
  opt_step(opt, ocfg, {&m.encoder, &m.decoder}, {&ge, &gd});
  return stats;
}

Batch vae_sample(const VaeModel& m, Index n, RngStream& rng) {
  Batch z = rng.normal_mat(n, m.d_z);
  return mlp_forward(m.decoder, z);
}

GeneratorHandle vae_generator(VaeModel& m) {
  GeneratorHandle g;
  g.dim = 2;
  g.params = &m.decoder;
  g.sample_graph = [&m](Index n, RngStream& rng) {
    auto ws = std::make_shared<MlpWorkspace>();
    Batch z = rng.normal_mat(n, m.d_z);
    SampleGraph sg;
    sg.x = mlp_forward(m.decoder, z, ws.get());
    sg.backward = [&m, ws](const Eigen::Ref<const Batch>& dY) {
      GradBundle g = grad_zeros_like(m.decoder);
      mlp_backward(m.decoder, *ws, dY, g);
      return g;
    };
    return sg;
  };
  return g;
}

Checkpoint to_checkpoint(const VaeModel& m) {
  Checkpoint ck;
  ck.flavor = "vae";
  ck.meta_json = "{}";
  ck.nets = {{"encoder", m.encoder}, {"decoder", m.decoder}};
  return ck;
}

VaeModel vae_from_checkpoint(const Checkpoint& ck) {
  require(ck.flavor == "vae", "checkpoint flavor is not 'vae'");
  VaeModel m;
  m.encoder = checkpoint_net(ck, "encoder");
  m.decoder = checkpoint_net(ck, "decoder");
  m.d_z = m.decoder.config.input_dim;
  require(m.encoder.config.output_dim == 2 * m.d_z,
          "vae checkpoint: encoder/decoder latent mismatch");
  return m;
}

// ---------------------------------------------------------------------------
// Drifting
// ---------------------------------------------------------------------------

DriftingModel drifting_init(RngStream& rng, Index hidden_width,
                            Index hidden_layers, Index latent_dim) {
  require(latent_dim >= 1, "drifting: latent dimension must be positive");
  DriftingModel m;
  m.latent_dim = latent_dim;
  m.net = mlp_init(net_config(latent_dim, 2, hidden_width, hidden_layers), rng);
  return m;
}

DriftField drifting_field(const Eigen::Ref<const Batch>& at,
                          const Eigen::Ref<const Batch>& positives,
                          const Eigen::Ref<const Batch>& negatives, double tau) {
  require(tau > 0.0, "drifting: kernel width must be positive");
  require(positives.rows() >= 1 && negatives.rows() >= 1,
          "drifting: empty positive or negative set");
  require(at.cols() == positives.cols() && at.cols() == negatives.cols(),
          "drifting: dimension mismatch");
  const double np = static_cast<double>(positives.rows());
  const double nm = static_cast<double>(negatives.rows());
  DriftField out;
  out.v.resize(at.rows(), at.cols());
  for (Index i = 0; i < at.rows(); ++i) {
    Vec kp = (-(positives.rowwise() - at.row(i)).rowwise().norm() / tau)
                 .array()
                 .exp();
    Vec km = (-(negatives.rowwise() - at.row(i)).rowwise().norm() / tau)
                 .array()
                 .exp();
    const double sp = kp.sum();
    const double sm = km.sum();
    if ((sp / np) * (sm / nm) < 1e-30) {
      // Underflowed normalizers: fall back to the factorized numerator over
      // the floored product so the result stays finite (typically zero).
      out.underflow = true;
      Eigen::RowVectorXd ap = kp.transpose() * positives / np;
      Eigen::RowVectorXd am = km.transpose() * negatives / nm;
      out.v.row(i) = (ap * (sm / nm) - am * (sp / np)) / 1e-30;
      continue;
    }
    // Normalized-weight form of the same ratio. This ordering makes the
    // degenerate cases cancel bitwise: a single pair gives weight k/k = 1,
    // identical sets give identical weighted means, and swapping the sets
    // is an exact sign flip.
    out.v.row(i) = (kp / sp).transpose() * positives -
                   (km / sm).transpose() * negatives;
  }
  check_finite(out.v, "drifting field");
  return out;
}

Vec drifting_field_point(const Eigen::Ref<const Vec>& x,
                         const Eigen::Ref<const Batch>& positives,
                         const Eigen::Ref<const Batch>& negatives, double tau,
                         bool* underflow) {
  DriftField f = drifting_field(x.transpose(), positives, negatives, tau);
  if (underflow) *underflow = f.underflow;
  return f.v.row(0).transpose();
}

DriftStepStats drifting_loss(const DriftingModel& m,
                             const Eigen::Ref<const Batch>& data,
                             const Eigen::Ref<const Batch>& eps,
                             GradBundle* g) {
  require(data.cols() == 2, "drifting: data must be 2-D");
  require(eps.cols() == m.latent_dim, "drifting: eps must be n x latent_dim");
  const double n = static_cast<double>(eps.rows());

  MlpWorkspace ws;
  Batch x = mlp_forward(m.net, eps, &ws);
  DriftField f = drifting_field(x, data, x, m.tau_drift);

  DriftStepStats stats;
  stats.underflow = f.underflow;
  stats.loss = f.v.rowwise().squaredNorm().mean();
  if (g) {
    // Regression onto stopgrad(x + V): residual is exactly -V.
    Batch dY = (-2.0 / n) * f.v;
    mlp_backward(m.net, ws, dY, *g);
  }
  return stats;
}

DriftStepStats drifting_train_step(DriftingModel& m,
                                   const Eigen::Ref<const Batch>& data,
                                   const OptConfig& ocfg, OptState& opt,
                                   RngStream& rng) {
  Batch eps = rng.normal_mat(data.rows(), m.latent_dim);
  GradBundle g = grad_zeros_like(m.net);
  DriftStepStats stats = drifting_loss(m, data, eps, &g);
  stats.grad_norm = opt_step(opt, ocfg, {&m.net}, {&g});
  return stats;
}

Batch drifting_sample(const DriftingModel& m, Index n, RngStream& rng) {
  return mlp_forward(m.net, rng.normal_mat(n, m.latent_dim));
}

GeneratorHandle drifting_generator(DriftingModel& m) {
  GeneratorHandle g;
  g.dim = 2;
  g.params = &m.net;
  g.sample_graph = [&m](Index n, RngStream& rng) {
    auto ws = std::make_shared<MlpWorkspace>();
    Batch eps = rng.normal_mat(n, m.latent_dim);
    SampleGraph sg;
    sg.x = mlp_forward(m.net, eps, ws.get());
    sg.backward = [&m, ws](const Eigen::Ref<const Batch>& dY) {
      GradBundle g = grad_zeros_like(m.net);
      mlp_backward(m.net, *ws, dY, g);
      return g;
    };
    return sg;
  };
  return g;
}

Checkpoint to_checkpoint(const DriftingModel& m) {
  Checkpoint ck;
  ck.flavor = "drifting";
  ck.meta_json = "{}";
  ck.nets = {{"net", m.net}};
  return ck;
}

DriftingModel drifting_from_checkpoint(const Checkpoint& ck) {
  require(ck.flavor == "drifting", "checkpoint flavor is not 'drifting'");
  DriftingModel m;
  m.net = checkpoint_net(ck, "net");
  m.latent_dim = m.net.config.input_dim;
  return m;
}

// ---------------------------------------------------------------------------
// MeanFlow
// ---------------------------------------------------------------------------

MeanFlowModel meanflow_init(RngStream& rng, Index hidden_width,
                            Index hidden_layers) {
  MeanFlowModel m;
  m.net = mlp_init(net_config(4, 2, hidden_width, hidden_layers), rng);
  return m;
}

void sample_tr(double p_eq, RngStream& rng, double& t, double& r) {
  auto sigmoid = [](double u) { return 1.0 / (1.0 + std::exp(-u)); };
  const double a = sigmoid(rng.normal() - 0.4);
  const double b = sigmoid(rng.normal() - 0.4);
  t = std::max(a, b);
  r = std::min(a, b);
  if (rng.uniform() < p_eq) r = t;
}

namespace {

// Net input [x_t, t, t - r] for a batch.
Matrix meanflow_input(const Eigen::Ref<const Batch>& xt,
                      const Eigen::Ref<const Vec>& t,
                      const Eigen::Ref<const Vec>& r) {
  Matrix X(xt.rows(), 4);
  X.leftCols(2) = xt;
  X.col(2) = t;
  X.col(3) = t - r;
  return X;
}

}  // namespace

MfStepStats meanflow_loss(const MeanFlowModel& m,
                          const Eigen::Ref<const Batch>& x0,
                          const Eigen::Ref<const Batch>& x1,
                          const Eigen::Ref<const Vec>& t,
                          const Eigen::Ref<const Vec>& r, GradBundle* g) {
  const Index n = x0.rows();
  require(x0.cols() == 2 && x1.cols() == 2, "meanflow: data must be 2-D");
  require(x1.rows() == n && t.size() == n && r.size() == n,
          "meanflow: batch size mismatch");
  require(((r.array() >= 0.0) && (r.array() <= t.array()) &&
           (t.array() <= 1.0))
              .all(),
          "meanflow: need 0 <= r <= t <= 1");

  Batch v = x1 - x0;
  Batch xt = x0 + (v.array().colwise() * t.array()).matrix();  // (1-t) x0 + t x1
  Matrix X = meanflow_input(xt, t, r);

  // d/dt of the input along the trajectory: x_t moves with v, and both time
  // channels move at unit rate (r held fixed).
  Matrix dX(n, 4);
  dX.leftCols(2) = v;
  dX.col(2).setOnes();
  dX.col(3).setOnes();

  MlpWorkspace ws;
  Batch u = mlp_forward(m.net, X, &ws);
  auto [u_jvp, dudt] = mlp_jvp(m.net, X, dX);
  (void)u_jvp;  // same forward pass; the stored workspace serves backward

  Vec gap = t - r;
  Batch u_star = v - (dudt.array().colwise() * gap.array()).matrix();
  Batch delta = u - u_star;
  Vec d2 = delta.rowwise().squaredNorm();
  Vec w = (d2.array() + m.weight_floor).pow(m.weight_power).matrix();

  MfStepStats stats;
  stats.loss = (d2.array() / w.array()).mean();
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("meanflow: non-finite loss");
  if (g) {
    // Target and weight are stop-gradients: only the direct u path counts.
    Batch dY = (2.0 / static_cast<double>(n)) *
               (delta.array().colwise() / w.array()).matrix();
    mlp_backward(m.net, ws, dY, *g);
  }
  return stats;
}

MfStepStats meanflow_train_step(MeanFlowModel& m,
                                const Eigen::Ref<const Batch>& data,
                                const OptConfig& ocfg, OptState& opt,
                                RngStream& rng) {
  const Index n = data.rows();
  Batch x1 = rng.normal_mat(n, 2);
  Vec t(n), r(n);
  for (Index i = 0; i < n; ++i) sample_tr(m.p_eq, rng, t(i), r(i));
  GradBundle g = grad_zeros_like(m.net);
  MfStepStats stats = meanflow_loss(m, data, x1, t, r, &g);
  stats.grad_norm = opt_step(opt, ocfg, {&m.net}, {&g});
  return stats;
}

namespace {

void require_meanflow_steps(Index steps) {
  require(steps == 1 || steps == 2 || steps == 4 || steps == 8 || steps == 16,
          "meanflow: step count must be one of {1, 2, 4, 8, 16}");
}

}  // namespace

Batch meanflow_sample(const MeanFlowModel& m, Index n, Index steps,
                      RngStream& rng) {
  require_meanflow_steps(steps);
  Batch x = rng.normal_mat(n, 2);
  for (Index k = 0; k < steps; ++k) {
    const double tk = static_cast<double>(steps - k) / static_cast<double>(steps);
    const double tk1 =
        static_cast<double>(steps - k - 1) / static_cast<double>(steps);
    Matrix X = meanflow_input(x, Vec::Constant(n, tk), Vec::Constant(n, tk1));
    x -= (tk - tk1) * mlp_forward(m.net, X);
  }
  return x;
}

GeneratorHandle meanflow_generator(MeanFlowModel& m, Index steps) {
  require_meanflow_steps(steps);
  GeneratorHandle g;
  g.dim = 2;
  g.params = &m.net;
  g.sample_graph = [&m, steps](Index n, RngStream& rng) {
    struct Trace {
      std::vector<MlpWorkspace> ws;
      std::vector<double> delta;
    };
    auto trace = std::make_shared<Trace>();
    trace->ws.resize(static_cast<size_t>(steps));
    trace->delta.resize(static_cast<size_t>(steps));

    Batch x = rng.normal_mat(n, 2);
    for (Index k = 0; k < steps; ++k) {
      const double tk =
          static_cast<double>(steps - k) / static_cast<double>(steps);
      const double tk1 =
          static_cast<double>(steps - k - 1) / static_cast<double>(steps);
      Matrix X = meanflow_input(x, Vec::Constant(n, tk), Vec::Constant(n, tk1));
      Batch u = mlp_forward(m.net, X, &trace->ws[static_cast<size_t>(k)]);
      trace->delta[static_cast<size_t>(k)] = tk - tk1;
      x -= (tk - tk1) * u;
    }

    SampleGraph sg;
    sg.x = std::move(x);
    sg.backward = [&m, steps, trace](const Eigen::Ref<const Batch>& dY) {
      GradBundle g = grad_zeros_like(m.net);
      Batch dx = dY;
      for (Index k = steps - 1; k >= 0; --k) {
        const double dlt = trace->delta[static_cast<size_t>(k)];
        Batch dU = -dlt * dx;
        Batch dIn = mlp_backward(m.net, trace->ws[static_cast<size_t>(k)], dU, g);
        dx += dIn.leftCols(2);  // identity path x_{k+1} = x_k - d u
      }
      return g;
    };
    return sg;
  };
  return g;
}

Checkpoint to_checkpoint(const MeanFlowModel& m) {
  Checkpoint ck;
  ck.flavor = "meanflow";
  ck.meta_json = "{}";
  ck.nets = {{"net", m.net}};
  return ck;
}

MeanFlowModel meanflow_from_checkpoint(const Checkpoint& ck) {
  require(ck.flavor == "meanflow", "checkpoint flavor is not 'meanflow'");
  MeanFlowModel m;
  m.net = checkpoint_net(ck, "net");
  require(m.net.config.input_dim == 4, "meanflow checkpoint: bad input dim");
  return m;
}

}  // namespace fav
