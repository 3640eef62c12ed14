#pragma once

#include <string>
#include <vector>

#include "fav/mlp.hpp"

namespace fav {

// Flat binary checkpoint: magic + flavor + free-form JSON meta + named nets
// with their configs and row-major layer arrays. Round-trips bit-exactly.
struct NamedNet {
  std::string name;
  MlpParams params;
};

struct Checkpoint {
  std::string flavor;     // "vae" | "drifting" | "meanflow" | "policy" | "mlp"
  std::string meta_json;  // model hyperparameters, seed, step
  std::vector<NamedNet> nets;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

const MlpParams& checkpoint_net(const Checkpoint& ck, const std::string& name);

}  // namespace fav
