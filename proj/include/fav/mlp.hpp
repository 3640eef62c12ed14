#pragma once

#include <utility>
#include <vector>

#include "fav/rng.hpp"
#include "fav/types.hpp"

namespace fav {

// MLPs are SiLU with a linear output layer; that is the only architecture any
// experiment here uses, so the engine stays batched, dense and double-only.
enum class Activation { silu = 0 };

struct MlpConfig {
  Index input_dim = 2;
  Index output_dim = 2;
  Index hidden_width = 256;
  Index hidden_layers = 3;  // >= 1
  Activation act = Activation::silu;

  Index n_linear() const { return hidden_layers + 1; }
  Index layer_in(Index l) const { return l == 0 ? input_dim : hidden_width; }
  Index layer_out(Index l) const {
    return l == hidden_layers ? output_dim : hidden_width;
  }
};

struct MlpParams {
  MlpConfig config;
  std::vector<Matrix> W;  // W[l] is (out x in)
  std::vector<Vec> b;
};

struct GradBundle {
  std::vector<Matrix> dW;
  std::vector<Vec> db;

  void set_zero();
  void add_scaled(const GradBundle& other, double s);  // this += s * other
  double squared_norm() const;
};

Index mlp_param_count(const MlpConfig& cfg);
MlpParams mlp_init(const MlpConfig& cfg, RngStream& rng);  // fan-in-scaled uniform
GradBundle grad_zeros_like(const MlpParams& p);

// Per-layer activations recorded by the forward pass for reverse mode.
struct MlpWorkspace {
  std::vector<Matrix> h;     // h[0] = X, h[l] = output of hidden layer l
  std::vector<Matrix> dact;  // activation derivative at each hidden pre-act
};

// Batched forward, rows are samples. Pass ws to keep what backward needs.
Batch mlp_forward(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                  MlpWorkspace* ws = nullptr);

// Reverse mode: dY is dL/d(output); accumulates parameter grads into g (+=)
// and returns dL/dX.
Batch mlp_backward(const MlpParams& p, const MlpWorkspace& ws,
                   const Eigen::Ref<const Batch>& dY, GradBundle& g);

// loss = mean over rows of ||f(x) - target||^2; grads accumulate into g.
// dX, when given, receives dloss/dX.
double backward_mse(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                    const Eigen::Ref<const Batch>& target, GradBundle& g,
                    Batch* dX = nullptr);

// Forward-mode directional derivative: (f(X), J_f(X) * dX) row-wise, exact.
std::pair<Batch, Batch> mlp_jvp(const MlpParams& p, const Eigen::Ref<const Batch>& X,
                                const Eigen::Ref<const Batch>& dX);

}  // namespace fav
