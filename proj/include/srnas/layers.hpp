#ifndef SRNAS_LAYERS_HPP
#define SRNAS_LAYERS_HPP

#include <memory>
#include <string>
#include <vector>

#include "srnas/tensor.hpp"

namespace srnas {

enum class Mode { Train, Eval };

// Single-input layer with cached activations: one forward, then one backward
// over the same data. backward returns d(loss)/d(input) and accumulates
// parameter gradients (callers zero them between optimizer steps).
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect_params(std::vector<NamedParam>& out) = 0;

  // He-style initialization where the layer has weights; default no-op.
  virtual void init_weights(Rng&) {}
  // Opt into spectral normalization (convs and linears only).
  virtual void enable_spectral_norm(Rng&) {}
  // Freeze/unfreeze the power-iteration update (kept on during training;
  // frozen for finite-difference checks).
  virtual void set_sn_update(bool) {}

 protected:
  std::string name_;
};

using LayerPtr = std::unique_ptr<Layer>;

// Zero-padded convolution, padding (k-1)/2, output ceil(h/stride).
// Weight layout [cout][cin/groups][k][k], always with bias.
// With spectral norm enabled, forward uses W/sigma where sigma is estimated by
// one power-iteration step per training forward; u/v are non-trainable buffers
// and the weight gradient accounts for sigma's dependence on W.
class Conv2d : public Layer {
 public:
  Conv2d(std::string name, int cin, int cout, int k, int stride = 1, int groups = 1);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;
  void init_weights(Rng& rng) override;
  void enable_spectral_norm(Rng& rng) override;
  void set_sn_update(bool on) override { sn_update_ = on; }

  int out_h(int h) const { return (h + 2 * pad_ - k_) / stride_ + 1; }
  int out_w(int w) const { return (w + 2 * pad_ - k_) / stride_ + 1; }

  Param w, b;

 private:
  const Scalar* effective_weight(Mode mode);
  void power_iteration_step();
  double sigma_from_uv() const;

  int cin_, cout_, k_, stride_, groups_, pad_;
  bool sn_ = false;
  bool sn_update_ = true;
  Param u_, v_;        // power-iteration buffers, non-trainable
  double sigma_ = 1.0;  // cached at forward for backward
  ArrayX w_eff_;
  Tensor x_;  // cached input
};

// y = x W^T + b on (N, F) tensors. Weight layout [out][in].
class Linear : public Layer {
 public:
  Linear(std::string name, int in, int out);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;
  void init_weights(Rng& rng) override;
  void enable_spectral_norm(Rng& rng) override;
  void set_sn_update(bool on) override { sn_update_ = on; }

  Param w, b;

 private:
  const Scalar* effective_weight(Mode mode);
  void power_iteration_step();
  double sigma_from_uv() const;

  int in_, out_;
  bool sn_ = false;
  bool sn_update_ = true;
  Param u_, v_;
  double sigma_ = 1.0;
  ArrayX w_eff_;
  Tensor x_;
};

// Per-channel (rank 4) or per-feature (rank 2) learned slope, init 0.25.
class PReLU : public Layer {
 public:
  PReLU(std::string name, int channels);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;

  Param a;

 private:
  int channels_;
  Tensor x_;
};

// Batch normalization over (N,H,W) per channel. Training mode uses batch
// statistics (biased variance) and updates running stats with momentum 0.1;
// eval mode uses the running stats, so fresh stats (mean 0, var 1) with
// gamma=1, beta=0 make it the identity map.
class BatchNorm : public Layer {
 public:
  BatchNorm(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;

  Param gamma, beta;
  Param run_mean, run_var;  // buffers

 private:
  int channels_;
  double momentum_, eps_;
  Mode fwd_mode_ = Mode::Train;
  Tensor xhat_;
  ArrayX invstd_;
  std::vector<int> in_shape_;
};

// (N, C*r^2, H, W) -> (N, C, r*H, r*W); out(h,w) reads channel block
// c*r^2 + (h%r)*r + (w%r) at (h/r, w/r).
class PixelShuffle : public Layer {
 public:
  PixelShuffle(std::string name, int r);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>&) override {}

 private:
  int r_;
  std::vector<int> in_shape_;
};

class Sigmoid : public Layer {
 public:
  explicit Sigmoid(std::string name) : Layer(std::move(name)) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>&) override {}

 private:
  Tensor y_;
};

// (N,C,H,W) -> (N,C) mean over the spatial plane.
class GlobalAvgPool : public Layer {
 public:
  explicit GlobalAvgPool(std::string name) : Layer(std::move(name)) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>&) override {}

 private:
  std::vector<int> in_shape_;
};

// (N,C,H,W) -> (N, C*H*W).
class Flatten : public Layer {
 public:
  explicit Flatten(std::string name) : Layer(std::move(name)) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>&) override {}

 private:
  std::vector<int> in_shape_;
};

// Depthwise k x k followed by an internal PReLU and a 1x1 pointwise merge.
class DSepConv : public Layer {
 public:
  DSepConv(std::string name, int channels, int k);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;
  void init_weights(Rng& rng) override;
  void enable_spectral_norm(Rng& rng) override;
  void set_sn_update(bool on) override;

 private:
  Conv2d dw_;
  PReLU act_;
  Conv2d pw_;
};

// 1x1 expand to 2c, depthwise k x k, 1x1 project back to c, with internal
// PReLUs after expand and depthwise.
class InvBottleneck : public Layer {
 public:
  InvBottleneck(std::string name, int channels, int k);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;
  void init_weights(Rng& rng) override;
  void enable_spectral_norm(Rng& rng) override;
  void set_sn_update(bool on) override;

 private:
  Conv2d expand_;
  PReLU act1_;
  Conv2d dw_;
  PReLU act2_;
  Conv2d project_;
};

// Squeeze/channel-attention gate: global average pool, two reduction-4
// transforms with an inner ReLU, sigmoid, channelwise rescale of the input.
class ChannelGate : public Layer {
 public:
  ChannelGate(std::string name, int channels, int reduction = 4);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<NamedParam>& out) override;
  void init_weights(Rng& rng) override;
  void enable_spectral_norm(Rng& rng) override;
  void set_sn_update(bool on) override;

 private:
  int channels_;
  Linear fc1_, fc2_;
  Tensor x_;
  Tensor z1_;    // pre-ReLU
  Tensor gate_;  // post-sigmoid (N,C)
};

// Fixed DAG of layers. Node inputs refer to earlier nodes; -1 is the network
// input. A node without a layer sums its inputs elementwise. One forward, then
// one backward; the input gradient is kept so losses can flow through an
// auxiliary network (discriminator, feature extractor) into a producer.
class Network {
 public:
  int add_layer(LayerPtr layer, int input);
  int add_sum(std::vector<int> inputs);
  void set_output(int node) { output_ = node; }
  int output_node() const { return output_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  Tensor forward(const Tensor& x, Mode mode);
  Tensor forward_node(const Tensor& x, int node, Mode mode);
  // d(loss)/d(output of `node`); returns nothing, see input_grad().
  void backward(const Tensor& dloss_dy);
  void backward_from(int node, const Tensor& dloss_dnode);

  const Tensor& input_grad() const { return input_grad_; }

  std::vector<NamedParam> parameters(bool trainable_only = false);
  std::int64_t param_count(bool trainable_only = true);
  void zero_grad();
  void init_weights(Rng& rng);
  void enable_spectral_norm(Rng& rng);
  void set_sn_update(bool on);

  // Finiteness sweep over the last forward's activations.
  bool activations_finite() const;

 private:
  struct Node {
    LayerPtr layer;           // null => sum node
    std::vector<int> inputs;  // single element for layer nodes
  };
  std::vector<Node> nodes_;
  int output_ = -1;
  int evaluated_upto_ = -1;
  std::vector<Tensor> outs_;
  Tensor input_;
  Tensor input_grad_;
};

}  // namespace srnas

#endif  // SRNAS_LAYERS_HPP
