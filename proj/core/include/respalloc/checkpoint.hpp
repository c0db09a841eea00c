#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "respalloc/param_store.hpp"

namespace resp {

inline constexpr int kCheckpointVersion = 1;

// A trained model on disk: the flat parameter vector plus enough metadata to
// rebuild the slice table and reject incompatible files.
struct Checkpoint {
  nlohmann::json meta;  // caller-owned: model config echo, epochs, final loss
  ParamStore params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Throws ParseError on malformed/version-mismatched files, IoError when the
// file cannot be read.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace resp
