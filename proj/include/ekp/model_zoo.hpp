#pragma once
#include <cstdint>
#include <vector>

#include "ekp/netcore.hpp"

namespace ekp::net {

// Plain conv stack: [conv-bn-relu]* -> gap -> dense. channels[i] with
// strides[i] (same length).
PrunableNetwork toy_cnn(const InputSpec& in, const std::vector<int>& channels,
                        const std::vector<int>& strides, std::uint64_t seed,
                        bool with_bn = true);

// Stem conv plus `blocks` residual blocks; the stem and every block's second
// conv form one coupling group. Small enough for exhaustive oracle tests.
PrunableNetwork toy_residual_cnn(const InputSpec& in, int width, std::uint64_t seed,
                                 int blocks = 1);

// CIFAR-topology ResNet (depth = 6n+2): three stages of n basic blocks with
// widths 16/32/64 and projection shortcuts at stage transitions.
PrunableNetwork resnet_cifar(int depth, int num_classes, std::uint64_t seed);

}  // namespace ekp::net
