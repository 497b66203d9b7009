#include "ekp/model_zoo.hpp"

#include <string>

#include "ekp/errors.hpp"

namespace ekp::net {

namespace {

LayerDesc conv(std::string name, int input, int out_channels, int k, int stride,
               int pad, int group = -1) {
  LayerDesc d;
  d.kind = LayerKind::Conv;
  d.name = std::move(name);
  d.inputs = {input};
  d.out_channels = out_channels;
  d.kh = k;
  d.kw = k;
  d.stride = stride;
  d.pad = pad;
  d.coupling_group = group;
  return d;
}

LayerDesc bn(std::string name, int input) {
  LayerDesc d;
  d.kind = LayerKind::BatchNorm;
  d.name = std::move(name);
  d.inputs = {input};
  return d;
}

LayerDesc relu(std::string name, int input) {
  LayerDesc d;
  d.kind = LayerKind::ReLU;
  d.name = std::move(name);
  d.inputs = {input};
  return d;
}

LayerDesc addl(std::string name, int a, int b) {
  LayerDesc d;
  d.kind = LayerKind::Add;
  d.name = std::move(name);
  d.inputs = {a, b};
  return d;
}

LayerDesc gap(std::string name, int input) {
  LayerDesc d;
  d.kind = LayerKind::GlobalAvgPool;
  d.name = std::move(name);
  d.inputs = {input};
  return d;
}

LayerDesc densel(std::string name, int input, int out) {
  LayerDesc d;
  d.kind = LayerKind::Dense;
  d.name = std::move(name);
  d.inputs = {input};
  d.out_features = out;
  return d;
}

LayerDesc input_layer() {
  LayerDesc d;
  d.kind = LayerKind::Input;
  d.name = "input";
  return d;
}

}  // namespace

PrunableNetwork toy_cnn(const InputSpec& in, const std::vector<int>& channels,
                        const std::vector<int>& strides, std::uint64_t seed,
                        bool with_bn) {
  if (channels.empty() || channels.size() != strides.size())
    throw StructuralError("toy_cnn: channels/strides mismatch");
  std::vector<LayerDesc> d;
  d.push_back(input_layer());
  int prev = 0;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::string tag = std::to_string(i);
    d.push_back(conv("conv" + tag, prev, channels[i], 3, strides[i], 1));
    if (with_bn) d.push_back(bn("bn" + tag, static_cast<int>(d.size()) - 1));
    d.push_back(relu("relu" + tag, static_cast<int>(d.size()) - 1));
    prev = static_cast<int>(d.size()) - 1;
  }
  d.push_back(gap("gap", prev));
  d.push_back(densel("fc", static_cast<int>(d.size()) - 1, in.num_classes));
  return PrunableNetwork::build(std::move(d), in, seed);
}

PrunableNetwork toy_residual_cnn(const InputSpec& in, int width, std::uint64_t seed,
                                 int blocks) {
  std::vector<LayerDesc> d;
  d.push_back(input_layer());
  d.push_back(conv("stem", 0, width, 3, 1, 1, /*group=*/0));
  d.push_back(bn("stem_bn", 1));
  d.push_back(relu("stem_relu", 2));
  int trunk = 3;
  for (int b = 1; b <= blocks; ++b) {
    const std::string tag = "b" + std::to_string(b);
    d.push_back(conv(tag + "_conv1", trunk, width, 3, 1, 1));
    d.push_back(bn(tag + "_bn1", static_cast<int>(d.size()) - 1));
    d.push_back(relu(tag + "_relu1", static_cast<int>(d.size()) - 1));
    d.push_back(conv(tag + "_conv2", static_cast<int>(d.size()) - 1, width, 3, 1, 1,
                     /*group=*/0));
    d.push_back(bn(tag + "_bn2", static_cast<int>(d.size()) - 1));
    d.push_back(addl(tag + "_add", static_cast<int>(d.size()) - 1, trunk));
    d.push_back(relu(tag + "_relu2", static_cast<int>(d.size()) - 1));
    trunk = static_cast<int>(d.size()) - 1;
  }
  d.push_back(gap("gap", trunk));
  d.push_back(densel("fc", static_cast<int>(d.size()) - 1, in.num_classes));
  return PrunableNetwork::build(std::move(d), in, seed);
}

PrunableNetwork resnet_cifar(int depth, int num_classes, std::uint64_t seed) {
  if (depth < 8 || (depth - 2) % 6 != 0)
    throw StructuralError("resnet_cifar: depth must be 6n+2");
  const int blocks = (depth - 2) / 6;
  const int widths[3] = {16, 32, 64};

  std::vector<LayerDesc> d;
  d.push_back(input_layer());
  d.push_back(conv("stem", 0, widths[0], 3, 1, 1, /*group=*/0));
  d.push_back(bn("stem_bn", 1));
  d.push_back(relu("stem_relu", 2));
  int trunk = 3;  // layer index of the current trunk tensor

  for (int s = 0; s < 3; ++s) {
    const int w = widths[s];
    const int group = s;
    for (int b = 0; b < blocks; ++b) {
      const std::string tag = "s" + std::to_string(s) + "b" + std::to_string(b);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      d.push_back(conv(tag + "_conv1", trunk, w, 3, stride, 1));
      d.push_back(bn(tag + "_bn1", static_cast<int>(d.size()) - 1));
      d.push_back(relu(tag + "_relu1", static_cast<int>(d.size()) - 1));
      d.push_back(conv(tag + "_conv2", static_cast<int>(d.size()) - 1, w, 3, 1, 1, group));
      d.push_back(bn(tag + "_bn2", static_cast<int>(d.size()) - 1));
      const int branch = static_cast<int>(d.size()) - 1;

      int shortcut = trunk;
      if (b == 0 && s > 0) {
        d.push_back(conv(tag + "_proj", trunk, w, 1, 2, 0, group));
        d.push_back(bn(tag + "_proj_bn", static_cast<int>(d.size()) - 1));
        shortcut = static_cast<int>(d.size()) - 1;
      }
      d.push_back(addl(tag + "_add", branch, shortcut));
      d.push_back(relu(tag + "_relu2", static_cast<int>(d.size()) - 1));
      trunk = static_cast<int>(d.size()) - 1;
    }
  }
  d.push_back(gap("gap", trunk));
  d.push_back(densel("fc", static_cast<int>(d.size()) - 1, num_classes));

  InputSpec in;
  in.channels = 3;
  in.height = 32;
  in.width = 32;
  in.num_classes = num_classes;
  return PrunableNetwork::build(std::move(d), in, seed);
}

}  // namespace ekp::net
