#include <cstring>
#include <fstream>

#include "fav/checkpoint.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"

namespace fav {

// ---------------------------------------------------------------------------
// Parameters

Index mlp_param_count(const MlpConfig& cfg) {
  Index n = 0;
  for (Index l = 0; l < cfg.n_linear(); ++l)
    n += cfg.layer_out(l) * (cfg.layer_in(l) + 1);
  return n;
}

MlpParams mlp_init(const MlpConfig& cfg, RngStream& rng) {
  require(cfg.input_dim > 0 && cfg.output_dim > 0 && cfg.hidden_width > 0,
          "mlp_init: dims must be positive");
  require(cfg.hidden_layers >= 1, "mlp_init: need at least one hidden layer");
  MlpParams p;
  p.config = cfg;
  p.W.resize(cfg.n_linear());
  p.b.resize(cfg.n_linear());
  for (Index l = 0; l < cfg.n_linear(); ++l) {
    const Index out = cfg.layer_out(l), in = cfg.layer_in(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    p.W[l].resize(out, in);
    p.b[l].resize(out);
    double* w = p.W[l].data();
    for (Index i = 0; i < out * in; ++i) w[i] = (2.0 * rng.uniform() - 1.0) * bound;
    for (Index i = 0; i < out; ++i) p.b[l][i] = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return p;
}

void GradBundle::set_zero() {
  for (auto& m : dW) m.setZero();
  for (auto& v : db) v.setZero();
}

void GradBundle::add_scaled(const GradBundle& other, double s) {
  for (size_t l = 0; l < dW.size(); ++l) {
    dW[l] += s * other.dW[l];
    db[l] += s * other.db[l];
  }
}

double GradBundle::squared_norm() const {
  double n = 0.0;
  for (const auto& m : dW) n += m.squaredNorm();
  for (const auto& v : db) n += v.squaredNorm();
  return n;
}

GradBundle grad_zeros_like(const MlpParams& p) {
  GradBundle g;
  g.dW.reserve(p.W.size());
  g.db.reserve(p.b.size());
  for (const auto& w : p.W) g.dW.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const auto& b : p.b) g.db.push_back(Vec::Zero(b.size()));
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward / jvp

namespace {

// silu(u) = u * sig(u); writes the activation into h and its derivative
// sig * (1 + u * (1 - sig)) into dact.
void silu_with_deriv(const Matrix& pre, Matrix& h, Matrix& dact) {
  const auto u = pre.array();
  auto sig = (1.0 / (1.0 + (-u).exp())).eval();
  h = (u * sig).matrix();
  dact = (sig * (1.0 + u * (1.0 - sig))).matrix();
}

}  // namespace

Batch mlp_forward(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                  MlpWorkspace* ws) {
  const MlpConfig& cfg = p.config;
  require(X.cols() == cfg.input_dim, "mlp_forward: input dim mismatch");
  if (ws) {
    ws->h.assign(static_cast<size_t>(cfg.hidden_layers) + 1, Matrix());
    ws->dact.assign(static_cast<size_t>(cfg.hidden_layers), Matrix());
    ws->h[0] = X;
  }
  Matrix h = X, pre, dact_unused;
  for (Index l = 0; l < cfg.hidden_layers; ++l) {
    pre.noalias() = h * p.W[l].transpose();
    pre.rowwise() += p.b[l].transpose();
    Matrix act, dact;
    silu_with_deriv(pre, act, dact);
    h = std::move(act);
    if (ws) {
      ws->h[l + 1] = h;
      ws->dact[l] = std::move(dact);
    }
  }
  Batch y;
  y.noalias() = h * p.W[cfg.hidden_layers].transpose();
  y.rowwise() += p.b[cfg.hidden_layers].transpose();
  return y;
}

Batch mlp_backward(const MlpParams& p, const MlpWorkspace& ws,
                   const Eigen::Ref<const Batch>& dY, GradBundle& g) {
  const MlpConfig& cfg = p.config;
  require(static_cast<Index>(ws.h.size()) == cfg.hidden_layers + 1,
          "mlp_backward: workspace does not match a recorded forward pass");
  const Index L = cfg.hidden_layers;
  Matrix d = dY;  // dL/d(post-activation of current layer)
  g.dW[L].noalias() += d.transpose() * ws.h[L];
  g.db[L] += d.colwise().sum().transpose();
  Matrix dh;
  dh.noalias() = d * p.W[L];
  for (Index l = L - 1; l >= 0; --l) {
    Matrix dp = dh.cwiseProduct(ws.dact[l]);
    g.dW[l].noalias() += dp.transpose() * ws.h[l];
    g.db[l] += dp.colwise().sum().transpose();
    dh.noalias() = dp * p.W[l];
  }
  return dh;
}

double backward_mse(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                    const Eigen::Ref<const Batch>& target, GradBundle& g,
                    Batch* dX) {
  require(X.rows() == target.rows() && target.cols() == p.config.output_dim,
          "backward_mse: target shape mismatch");
  require(X.rows() > 0, "backward_mse: empty batch");
  MlpWorkspace ws;
  Batch y = mlp_forward(p, X, &ws);
  Matrix r = y - target;
  const double n = static_cast<double>(X.rows());
  const double loss = r.squaredNorm() / n;
  Matrix dY = (2.0 / n) * r;
  Batch dx = mlp_backward(p, ws, dY, g);
  if (dX) *dX = std::move(dx);
  return loss;
}

std::pair<Batch, Batch> mlp_jvp(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                                const Eigen::Ref<const Batch>& dX) {
  const MlpConfig& cfg = p.config;
  require(dX.rows() == X.rows() && dX.cols() == X.cols(),
          "mlp_jvp: tangent shape mismatch");
  Matrix h = X, dh = dX, pre;
  for (Index l = 0; l < cfg.hidden_layers; ++l) {
    pre.noalias() = h * p.W[l].transpose();
    pre.rowwise() += p.b[l].transpose();
    Matrix dpre;
    dpre.noalias() = dh * p.W[l].transpose();
    Matrix act, dact;
    silu_with_deriv(pre, act, dact);
    h = std::move(act);
    dh = dpre.cwiseProduct(dact);
  }
  Batch y, dy;
  y.noalias() = h * p.W[cfg.hidden_layers].transpose();
  y.rowwise() += p.b[cfg.hidden_layers].transpose();
  dy.noalias() = dh * p.W[cfg.hidden_layers].transpose();
  return {std::move(y), std::move(dy)};
}

// ---------------------------------------------------------------------------
// Optimizer

OptState opt_init(const std::vector<const MlpParams*>& nets) {
  OptState st;
  for (const MlpParams* p : nets) {
    st.m.push_back(grad_zeros_like(*p));
    st.v.push_back(grad_zeros_like(*p));
  }
  return st;
}

double opt_step(OptState& st, const OptConfig& cfg,
                const std::vector<MlpParams*>& nets,
                const std::vector<const GradBundle*>& grads) {
  require(nets.size() == grads.size() && nets.size() == st.m.size(),
          "opt_step: net/grad/state count mismatch");
  double sq = 0.0;
  for (const GradBundle* g : grads) sq += g->squared_norm();
  const double gnorm = std::sqrt(sq);
  const double scale =
      (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm) ? cfg.clip_norm / gnorm : 1.0;

  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));

  for (size_t k = 0; k < nets.size(); ++k) {
    MlpParams& p = *nets[k];
    const GradBundle& g = *grads[k];
    for (size_t l = 0; l < p.W.size(); ++l) {
      auto upd = [&](auto& theta, const auto& grad, auto& m, auto& v) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * (scale * grad).array();
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (scale * grad).array().square();
        theta.array() -= cfg.lr * ((m / bc1) / ((v / bc2).sqrt() + cfg.eps) +
                                   cfg.weight_decay * theta.array());
      };
      auto mw = st.m[k].dW[l].array();
      auto vw = st.v[k].dW[l].array();
      upd(p.W[l], g.dW[l], mw, vw);
      auto mb = st.m[k].db[l].array();
      auto vb = st.v[k].db[l].array();
      upd(p.b[l], g.db[l], mb, vb);
    }
  }
  return gnorm;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'A', 'V', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void put_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
int64_t get_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string get_str(std::istream& is) {
  const uint32_t n = get_u32(is);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 8);
  put_str(os, ck.flavor);
  put_str(os, ck.meta_json);
  put_u32(os, static_cast<uint32_t>(ck.nets.size()));
  for (const NamedNet& nn : ck.nets) {
    const MlpConfig& c = nn.params.config;
    put_str(os, nn.name);
    put_i64(os, c.input_dim);
    put_i64(os, c.output_dim);
    put_i64(os, c.hidden_width);
    put_i64(os, c.hidden_layers);
    put_i64(os, static_cast<int64_t>(c.act));
    for (Index l = 0; l < c.n_linear(); ++l) {
      const Matrix& W = nn.params.W[l];
      put_i64(os, W.rows());
      put_i64(os, W.cols());
      for (Index i = 0; i < W.rows(); ++i)  // row-major on disk
        for (Index j = 0; j < W.cols(); ++j) {
          const double v = W(i, j);
          os.write(reinterpret_cast<const char*>(&v), 8);
        }
      const Vec& b = nn.params.b[l];
      os.write(reinterpret_cast<const char*>(b.data()),
               static_cast<std::streamsize>(8 * b.size()));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.flavor = get_str(is);
  ck.meta_json = get_str(is);
  const uint32_t n_nets = get_u32(is);
  if (n_nets > 16) throw std::runtime_error("checkpoint: implausible net count");
  for (uint32_t k = 0; k < n_nets; ++k) {
    NamedNet nn;
    nn.name = get_str(is);
    MlpConfig c;
    c.input_dim = get_i64(is);
    c.output_dim = get_i64(is);
    c.hidden_width = get_i64(is);
    c.hidden_layers = get_i64(is);
    c.act = static_cast<Activation>(get_i64(is));
    nn.params.config = c;
    for (Index l = 0; l < c.n_linear(); ++l) {
      const Index rows = get_i64(is), cols = get_i64(is);
      if (rows != c.layer_out(l) || cols != c.layer_in(l))
        throw std::runtime_error("checkpoint: layer shape mismatch in " + path);
      Matrix W(rows, cols);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) {
          double v;
          is.read(reinterpret_cast<char*>(&v), 8);
          W(i, j) = v;
        }
      Vec b(rows);
      is.read(reinterpret_cast<char*>(b.data()), 8 * rows);
      nn.params.W.push_back(std::move(W));
      nn.params.b.push_back(std::move(b));
    }
    ck.nets.push_back(std::move(nn));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
  return ck;
}

const MlpParams& checkpoint_net(const Checkpoint& ck, const std::string& name) {
  for (const NamedNet& nn : ck.nets)
    if (nn.name == name) return nn.params;
  throw std::runtime_error("checkpoint: no net named '" + name + "'");
}

}  // namespace fav
