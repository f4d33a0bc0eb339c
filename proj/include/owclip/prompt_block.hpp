#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "owclip/error.hpp"
#include "owclip/rng.hpp"

namespace owclip {

// Learnable prompt tokens of one episode: `length` tokens of width `d_model`
// injected at the input of every encoder layer. Stored flat as
// tokens[(layer * length + m) * d_model + j].
struct PromptBlock {
  int episode_id = 0;
  std::size_t layers = 0;
  std::size_t length = 0;
  std::size_t d_model = 0;
  std::vector<double> tokens;

  PromptBlock() = default;
  PromptBlock(int episode, std::size_t n_layers, std::size_t m, std::size_t width)
      : episode_id(episode), layers(n_layers), length(m), d_model(width),
        tokens(n_layers * m * width, 0.0) {}

  static PromptBlock random(int episode, std::size_t n_layers, std::size_t m, std::size_t width,
                            std::uint64_t seed, double stddev = 1.0) {
    PromptBlock b(episode, n_layers, m, width);
    Rng rng(seed);
    for (double& v : b.tokens) v = rng.normal(0.0, stddev);
    return b;
  }

  std::size_t size() const { return tokens.size(); }

  std::span<const double> token(std::size_t layer, std::size_t m) const {
    return {tokens.data() + (layer * length + m) * d_model, d_model};
  }
  std::span<double> token(std::size_t layer, std::size_t m) {
    return {tokens.data() + (layer * length + m) * d_model, d_model};
  }

  void require_shape(std::size_t n_layers, std::size_t width) const {
    if (length == 0) return;
    if (layers != n_layers) throw ConfigError("prompt block layer count does not match encoder");
    if (d_model != width) throw ConfigError("prompt block width does not match encoder d_model");
  }
};

}  // namespace owclip
