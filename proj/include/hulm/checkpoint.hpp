#pragma once

#include <map>
#include <string>

#include "hulm/tensor.hpp"
#include "hulm/util.hpp"

namespace hulm {

// Flat binary container of named tensors with a human-readable key=value
// header. Layout: magic + version line, u64 header length + header text,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u64 dims, raw little-endian f64 values. Round-trips bit-exactly.

extern const char* const kCheckpointMagic;  // "hulm-checkpoint-v1\n"

void save_tensor_file(const std::string& path, const KvConfig& header,
                      const std::map<std::string, Tensor>& tensors);

struct TensorFile {
    KvConfig header;
    std::map<std::string, Tensor> tensors;
};
TensorFile load_tensor_file(const std::string& path);

}  // namespace hulm
