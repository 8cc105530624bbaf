#pragma once

#include <string>
#include <vector>

#include "bllm/bev.hpp"
#include "bllm/model.hpp"
#include "bllm/rng.hpp"
#include "bllm/vocab.hpp"

namespace toy {

inline bllm::Vocabulary small_vocab() {
  const std::vector<std::string> texts = {
      "How many lanes are there?", "The scene contains a urban road with good data quality.", "0 1 2 3 4 5 6 7 8 9",
      "yes, intersection", "no"};
  return bllm::Vocabulary::build(texts);
}

// d=16, one layer each side.
inline bllm::ModelConfig tiny_config(std::size_t vocab_size) {
  bllm::ModelConfig c;
  c.d_bev = 8;
  c.d = 16;
  c.encoder_layers = 1;
  c.encoder_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.mlp_ratio = 2;
  c.vocab_size = vocab_size;
  c.max_seq = 96;
  c.lora_rank = 2;
  c.lora_alpha = 4.0;
  return c;
}

inline bllm::BevImage noise_image(std::uint64_t seed) {
  bllm::Rng rng(seed);
  bllm::BevImage img(448, 448);
  for (std::size_t r = 0; r < 448; ++r)
    for (std::size_t c = 0; c < 448; ++c) {
      const auto v = static_cast<std::uint8_t>(rng.below(256));
      img.set(c, r, bllm::Rgb{v, v, v});
    }
  return img;
}

// LoRA B factors start at zero, which leaves A without gradient; give them
// small random values so every group carries signal.
inline void randomize_lora_b(bllm::MultimodalModel& m, std::uint64_t seed) {
  bllm::Rng rng(seed);
  for (bllm::Parameter* p : m.parameters()) {
    if (p->name.find("lora_b") == std::string::npos) continue;
    for (double& v : p->value.data()) v = rng.normal(0.0, 0.1);
  }
}

}  // namespace toy
