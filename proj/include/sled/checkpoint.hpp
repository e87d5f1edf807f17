// Flat binary parameter container: magic "SLEDCKPT", format version, config
// digest, then named tensors (params first, buffers after, insertion order)
// as little-endian 64-bit floats. Round-trips bitwise.
#pragma once

#include <string>

#include "sled/model.hpp"

namespace sled {

void save_checkpoint(const StereoModel& model, const std::string& path);

// Loads into an existing model; the stored digest must match the model
// config's digest (CompatError otherwise).
void load_checkpoint(StereoModel& model, const std::string& path);

// Digest recorded in a checkpoint header, without loading tensors.
std::string checkpoint_digest(const std::string& path);

}  // namespace sled
