#pragma once

#include <string>

#include "dfa/feedback.hpp"
#include "dfa/network.hpp"

namespace dfa {

// Flat little-endian binary files.
//
// Feedback file: magic "DFAW", version u32, seed u64, record count u32.
// Record: role u32 (0 per-layer, 1 dec_to_cell, 2 dec_to_emb, 3 cell_to_emb),
// index u32, encoding u32 (0 dense, 1 conv pair, 2 triangular, 3 signed
// sparse), scale f64, then dims (u32 rank + u64 each) and the f32 payload;
// signed-sparse records store the packed bitmap followed by the nonzero
// values; conv pairs store dilation/groups/shuffle then both kernels;
// triangular records store block size, steps, and the upper blocks row-major.
//
// Parameter file: magic "DFAP", version u32, tensor count u32, then per tensor
// dims and f32 payload.

void save_params(const std::string& path, const ParamsT<float>& params);
void load_params(const std::string& path, ParamsT<float>& into);

void save_feedback(const std::string& path, const FeedbackSetT<float>& fb, std::uint64_t seed);
FeedbackSetT<float> load_feedback(const std::string& path, const NetworkPlan& plan);

// Optimizer-state checkpoints: a scalar block followed by the moment buffers
// (same tensor framing as the parameter file, magic "DFAS").
void save_optimizer_state(const std::string& path, const std::vector<double>& scalars,
                          const std::vector<const TensorT<float>*>& buffers);
void load_optimizer_state(const std::string& path, std::vector<double>& scalars,
                          const std::vector<TensorT<float>*>& buffers);

} // namespace dfa
