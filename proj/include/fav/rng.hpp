#pragma once

#include <cstdint>
#include <string_view>

#include "fav/types.hpp"

namespace fav {

// Counter-based PRNG: draw i of stream s is hash(s, i), nothing else carries
// state. Streams fork with split(), so each sampling site can own its own
// stream and a run stays bit-reproducible no matter what happens elsewhere.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : seed_(seed) {}

  // Independent child stream; same (seed, key) always yields the same child.
  RngStream split(uint64_t key) const;
  RngStream split(std::string_view label) const;

  uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // N(0, 1), Box-Muller with cached spare

  // Draw uniformly from {0, ..., n-1}.
  Index uniform_index(Index n);

  // Bulk draws. Column-major fill order; these bypass the scalar spare so the
  // values depend only on the stream position at call time.
  void fill_normal(Eigen::Ref<Matrix> out);
  Matrix normal_mat(Index rows, Index cols);
  Vec normal_vec(Index n);

  uint64_t counter() const { return ctr_; }

 private:
  uint64_t seed_;
  uint64_t ctr_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fav
