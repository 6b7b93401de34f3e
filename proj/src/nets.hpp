// SPDX-License-Identifier: Apache-2.0
/**
 * @file   nets.hpp
 * @brief  Desk-scale networks: the conditional noise predictor, the latent
 *         codecs and the BN-instrumented teacher/student classifiers.
 */
#ifndef DFKD_NETS_HPP_
#define DFKD_NETS_HPP_

#include "autograd.hpp"
#include "rng.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace dfkd {

using NamedTensor = std::pair<std::string, Tensor *>;

class Conv2d {
public:
  Conv2d() = default;
  Conv2d(const std::string &name, std::size_t in, std::size_t out, int kernel,
         int stride, int pad, Rng &rng, bool bias = true);

  Var operator()(const Var &x) const;
  void collect(std::vector<Parameter *> &out);
  void state(std::vector<NamedTensor> &out);
  Parameter &weight() { return weight_; }

private:
  Parameter weight_, bias_;
  bool has_bias_ = true;
  int stride_ = 1, pad_ = 0;
};

class Linear {
public:
  Linear() = default;
  Linear(const std::string &name, std::size_t in, std::size_t out, Rng &rng,
         bool bias = true);
  Var operator()(const Var &x) const;
  void collect(std::vector<Parameter *> &out);
  void state(std::vector<NamedTensor> &out);
  const Parameter &weight() const { return weight_; }

private:
  Parameter weight_, bias_;
  bool has_bias_ = true;
};

/// Running mean and (biased) running variance of one BN layer's input.
struct BNLayerStats {
  std::size_t layer_id = 0;
  Tensor running_mean;
  Tensor running_var;
};

/// Batch moments of a BN layer's input, differentiable w.r.t. the images.
struct BatchMoments {
  Var mean;
  Var var; // biased, not floored
};

class BatchNorm2d {
public:
  static constexpr double kEps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string &name, std::size_t channels,
              double momentum = 0.1);

  /// Batch statistics; updates running statistics.
  Var train_forward(const Var &x);
  /// Running statistics; read-only.
  Var eval_forward(const Var &x) const;
  void collect(std::vector<Parameter *> &out);
  void state(std::vector<NamedTensor> &out);
  BNLayerStats stats(std::size_t id) const {
    return {id, running_mean_, running_var_};
  }

private:
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  double momentum_ = 0.1;
};

enum class Mode { Train, Eval };

struct ClassifierSpec {
  std::string name = "classifier";
  std::size_t in_channels = 1;
  std::size_t image_size = 16;
  std::size_t num_classes = 2;
  std::size_t stem_width = 16;
  std::array<std::size_t, 3> widths{16, 32, 64};
};

struct ClassifierOutput {
  Var logits;
  /// Post-activation output of each downsampling stage (CAM taps).
  std::vector<Var> taps;
  /// Pre-BN input moments for each BN layer (only when requested).
  std::vector<BatchMoments> bn_moments;
};

/// Stem + three stride-2 stages, each conv-BN-ReLU x2, global pooling and a
/// linear head. Every non-final stage has a 1x1 class projection used for
/// class activation maps.
class Classifier {
public:
  static constexpr std::size_t kStages = 3;

  Classifier(const ClassifierSpec &spec, std::uint64_t seed);

  /// Training forward: batch statistics, running statistics updated.
  ClassifierOutput train_forward(const Var &x);
  /// Inference forward: running statistics, parameters unchanged.
  ClassifierOutput forward(const Var &x, bool collect_bn_moments = false) const;

  const ClassifierSpec &spec() const { return spec_; }
  std::size_t num_classes() const { return spec_.num_classes; }
  std::vector<Parameter *> parameters();
  std::vector<NamedTensor> state();
  std::vector<BNLayerStats> bn_layers() const;
  std::size_t num_bn_layers() const { return bns_.size(); }

  const Parameter &head_weight() const { return head_.weight(); }
  /// Class projection [K x C_k] used for the CAM at stage tap k.
  const Parameter &tap_projection(std::size_t k) const;
  std::size_t tap_channels(std::size_t k) const { return spec_.widths.at(k); }
  /// Side length after k + 1 stride-2 convolutions (kernel 3, pad 1).
  std::size_t tap_resolution(std::size_t k) const {
    std::size_t r = spec_.image_size;
    for (std::size_t i = 0; i <= k; ++i)
      r = (r - 1) / 2 + 1;
    return r;
  }

  /// Checksums of parameters and of BN running statistics.
  std::uint64_t parameter_checksum() const;
  std::uint64_t bn_checksum() const;

private:
  ClassifierOutput run(const Var &x, Mode mode, bool collect);

  ClassifierSpec spec_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> bns_;
  Linear head_;
  std::array<Parameter, kStages - 1> projections_;
};

/// Pre-BN batch moments per BN layer for the given images (eval mode).
std::vector<BatchMoments> extract_batch_stats(const Classifier &net,
                                              const Var &images);

struct DenoiserSpec {
  std::size_t channels = 1;
  std::size_t size = 16;
  std::size_t num_classes = 2;
  std::size_t width = 16;
  int num_steps = 10;
  bool zero_init_output = true;
};

/// Small UNet-style noise predictor conditioned on timestep and class.
/// Condition id `num_classes` is the trainable null condition.
class Denoiser {
public:
  Denoiser(const DenoiserSpec &spec, std::uint64_t seed);

  Var forward(const Var &z, const std::vector<int> &timesteps,
              const std::vector<int> &conditions) const;
  Var forward(const Var &z, int timestep,
              const std::vector<int> &conditions) const;

  const DenoiserSpec &spec() const { return spec_; }
  int condition_vocab() const { return static_cast<int>(spec_.num_classes) + 1; }
  int null_condition() const { return static_cast<int>(spec_.num_classes); }
  std::vector<Parameter *> parameters();
  std::vector<NamedTensor> state();
  std::uint64_t parameter_checksum() const;

private:
  DenoiserSpec spec_;
  Linear time1_, time2_, emb_down_;
  Parameter class_table_;
  Conv2d conv_in_, conv_a_, conv_b_, conv_c_, conv_d_, conv_e_, conv_out_;
};

/// Maps images to latents and back. Latents are multiplied by a global
/// scale (fitted so the generator sees roughly unit-variance latents).
class Codec {
public:
  virtual ~Codec() = default;
  virtual std::string kind() const = 0;
  virtual Shape latent_shape(const Shape &image_shape) const = 0;
  Var encode(const Var &x) const;
  Var decode(const Var &z) const;
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s);
  virtual std::vector<Parameter *> parameters() { return {}; }
  virtual std::vector<NamedTensor> state() { return {}; }

protected:
  virtual Var encode_raw(const Var &x) const = 0;
  virtual Var decode_raw(const Var &z) const = 0;

private:
  double latent_scale_ = 1.0;
};

class IdentityCodec final : public Codec {
public:
  std::string kind() const override { return "identity"; }
  Shape latent_shape(const Shape &s) const override { return s; }

protected:
  Var encode_raw(const Var &x) const override { return x; }
  Var decode_raw(const Var &z) const override { return z; }
};

/// Convolutional autoencoder halving the resolution; latent channels set by
/// `latent_channels`.
class AutoencoderCodec final : public Codec {
public:
  AutoencoderCodec(std::size_t image_channels, std::size_t latent_channels,
                   std::uint64_t seed);
  std::string kind() const override { return "autoencoder"; }
  Shape latent_shape(const Shape &s) const override;
  std::vector<Parameter *> parameters() override;
  std::vector<NamedTensor> state() override;

protected:
  Var encode_raw(const Var &x) const override;
  Var decode_raw(const Var &z) const override;

private:
  std::size_t image_channels_, latent_channels_;
  Conv2d enc1_, enc2_, dec1_, dec2_;
};

std::unique_ptr<Codec> make_codec(const std::string &kind,
                                  std::size_t image_channels,
                                  std::size_t latent_channels,
                                  std::uint64_t seed);

class Adam {
public:
  Adam(std::vector<Parameter *> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void zero_grad();
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

private:
  std::vector<Parameter *> params_;
  std::vector<Tensor> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

std::uint64_t state_checksum(const std::vector<NamedTensor> &state);

} // namespace dfkd

#endif // DFKD_NETS_HPP_
