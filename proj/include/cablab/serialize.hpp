#pragma once

#include <map>
#include <optional>
#include <string>

#include "cablab/dataset.hpp"
#include "cablab/model.hpp"
#include "cablab/prune.hpp"
#include "cablab/quant.hpp"

namespace cablab::harness {

// Versioned binary formats, little-endian throughout.
//
// Dataset ("CABD" v1): magic, version u16, count/channels/height/width/
// num_classes u32, split tag u8, labels u16[count], pixels f32[count*C*H*W].
//
// Model ("CABM" v1): magic, version u16, num_classes u16, input shape
// (u8 rank + u32 dims), layer table (kind u8 + hyper u32s), parameter payload
// (u64 count + f32 data per tensor), then tagged optional sections:
// "QPRM" per-layer quantization params (scale f32, zero point i16, range u8
// for weight/input/output), "PRSP" a prune spec (rate f32 + dropped indices).

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

struct ModelAnnotations {
    std::map<int, quant::LayerQuant> quant_layers;
    std::optional<prune::PruneSpec> prune_spec;

    bool empty() const { return quant_layers.empty() && !prune_spec.has_value(); }
};

void save_model(const Model& m, const std::string& path, const ModelAnnotations* annotations = nullptr);

struct LoadedModel {
    Model model;
    ModelAnnotations annotations;
};

LoadedModel load_model(const std::string& path);

}  // namespace cablab::harness
