#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dvfa/nn.hpp"

namespace dvfa::ckpt {

// Binary container: magic, format version, JSON metadata blob, named
// parameter tensors (f64 or f32 storage), optional AdamW state.
inline constexpr char kMagic[8] = {'D', 'V', 'F', 'A', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kVersion = 1;

void save(const std::string& path, const nn::ParamStore& store, const std::string& meta_json,
          const ag::AdamW* optimizer = nullptr, bool float32_storage = false);

struct Loaded {
    std::string meta;
    std::map<std::string, std::pair<std::vector<std::int64_t>, std::vector<real>>> params;
    bool has_optimizer = false;
    ag::AdamW optimizer;
};

Loaded load(const std::string& path);

// Copies loaded values into an existing (already built) parameter store;
// names and shapes must match exactly.
void apply(const Loaded& loaded, nn::ParamStore& store);

}  // namespace dvfa::ckpt
