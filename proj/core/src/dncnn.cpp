#include "demun/dncnn.hpp"

#include <cmath>

#include "demun/rng.hpp"

namespace demun {

void DnCNNConfig::validate() const {
  check_config(depth_L >= 0, "dncnn depth must be >= 0");
  check_config(channels >= 1, "dncnn channels must be >= 1");
  check_config(kernel >= 1 && kernel % 2 == 1, "dncnn kernel must be odd and >= 1");
  check_config(image_k >= 1, "dncnn image side must be >= 1");
}

namespace {

ConvParams make_conv(int64_t cout, int64_t cin, int64_t k, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(cin * k * k));
  ConvParams conv;
  conv.weight = Parameter(Tensor({cout, cin, k, k}));
  conv.bias = Parameter(Tensor({cout}));
  for (int64_t i = 0; i < conv.weight.value.numel(); ++i)
    conv.weight.value[i] = rng.uniform(-bound, bound);
  for (int64_t i = 0; i < conv.bias.value.numel(); ++i)
    conv.bias.value[i] = rng.uniform(-bound, bound);
  return conv;
}

}  // namespace

ProjectorParams build_projector(const DnCNNConfig& config, bool residual, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ProjectorParams p;
  p.config = config;
  p.residual = residual;
  p.input = make_conv(config.channels, 1, config.kernel, rng);
  p.blocks.reserve(static_cast<size_t>(config.depth_L));
  for (int64_t l = 0; l < config.depth_L; ++l) {
    MidBlock block;
    block.conv = make_conv(config.channels, config.channels, config.kernel, rng);
    block.bn.gamma = Parameter(Tensor::full({config.channels}, 1.0));
    block.bn.beta = Parameter(Tensor({config.channels}));
    block.bn.stats = BatchNormStats(config.channels);
    p.blocks.push_back(std::move(block));
  }
  p.output = make_conv(1, config.channels, config.kernel, rng);
  return p;
}

int64_t projector_param_count(const DnCNNConfig& config) {
  const int64_t c = config.channels, kk = config.kernel * config.kernel;
  const int64_t input = c * 1 * kk + c;
  const int64_t block = c * c * kk + c + 2 * c;  // conv weight+bias, gamma, beta
  const int64_t output = 1 * c * kk + 1;
  return input + config.depth_L * block + output;
}

Var project(Graph& g, ProjectorParams& params, Var x_img) {
  const Shape& s = x_img.shape();
  check_shape(s.size() == 4 && s[1] == 1, "project: input must be [B,1,k,k], got " + shape_str(s));
  check_shape(s[2] == params.config.image_k && s[3] == params.config.image_k,
              "project: spatial dims " + shape_str(s) + " do not match configured side " +
                  std::to_string(params.config.image_k));

  Var h = relu(conv2d(x_img, param(g, params.input.weight), param(g, params.input.bias)));
  for (MidBlock& block : params.blocks) {
    Var c = conv2d(h, param(g, block.conv.weight), param(g, block.conv.bias));
    Var b = batch_norm(c, param(g, block.bn.gamma), param(g, block.bn.beta), block.bn.stats);
    h = relu(b);
  }
  Var out = conv2d(h, param(g, params.output.weight), param(g, params.output.bias));
  return params.residual ? add(x_img, out) : out;
}

void collect_projector_tensors(ProjectorParams& params, const std::string& prefix,
                               std::vector<NamedTensor>& out) {
  auto add_param = [&out](const std::string& name, Parameter& p) {
    out.push_back({name, &p.value, &p});
  };
  auto add_buffer = [&out](const std::string& name, Tensor& t) {
    out.push_back({name, &t, nullptr});
  };
  add_param(prefix + ".in.weight", params.input.weight);
  add_param(prefix + ".in.bias", params.input.bias);
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    const std::string base = prefix + ".block" + std::to_string(l);
    MidBlock& block = params.blocks[l];
    add_param(base + ".weight", block.conv.weight);
    add_param(base + ".bias", block.conv.bias);
    add_param(base + ".gamma", block.bn.gamma);
    add_param(base + ".beta", block.bn.beta);
    add_buffer(base + ".running_mean", block.bn.stats.running_mean);
    add_buffer(base + ".running_var", block.bn.stats.running_var);
  }
  add_param(prefix + ".out.weight", params.output.weight);
  add_param(prefix + ".out.bias", params.output.bias);
}

}  // namespace demun
