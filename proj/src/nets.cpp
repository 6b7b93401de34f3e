// SPDX-License-Identifier: Apache-2.0
#include "nets.hpp"

#include <cmath>

namespace dfkd {

namespace {

Tensor he_init(const Shape &s, std::size_t fan_in, Rng &rng) {
  Tensor t(s);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto &v : t.vec())
    v = rng.normal() * sd;
  return t;
}

void mix_tensor(std::uint64_t &h, const Tensor &t) {
  h = fnv1a(t.data(), t.numel() * sizeof(double), h);
}

} // namespace

std::uint64_t state_checksum(const std::vector<NamedTensor> &state) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto &[name, t] : state) {
    h = fnv1a(name.data(), name.size(), h);
    mix_tensor(h, *t);
  }
  return h;
}

// ---------------------------------------------------------------- layers

Conv2d::Conv2d(const std::string &name, std::size_t in, std::size_t out,
               int kernel, int stride, int pad, Rng &rng, bool bias)
    : weight_(name + ".weight",
              he_init({out, in, static_cast<std::size_t>(kernel),
                       static_cast<std::size_t>(kernel)},
                      in * kernel * kernel, rng)),
      bias_(name + ".bias", Tensor({out}, 0.0)), has_bias_(bias),
      stride_(stride), pad_(pad) {}

Var Conv2d::operator()(const Var &x) const {
  return ag::conv2d(x, weight_.use(), has_bias_ ? bias_.use() : Var(), stride_,
                    pad_);
}

void Conv2d::collect(std::vector<Parameter *> &out) {
  out.push_back(&weight_);
  if (has_bias_)
    out.push_back(&bias_);
}

void Conv2d::state(std::vector<NamedTensor> &out) {
  out.emplace_back(weight_.name, &weight_.value);
  if (has_bias_)
    out.emplace_back(bias_.name, &bias_.value);
}

Linear::Linear(const std::string &name, std::size_t in, std::size_t out,
               Rng &rng, bool bias)
    : weight_(name + ".weight", he_init({out, in}, in, rng)),
      bias_(name + ".bias", Tensor({out}, 0.0)), has_bias_(bias) {}

Var Linear::operator()(const Var &x) const {
  return ag::linear(x, weight_.use(), has_bias_ ? bias_.use() : Var());
}

void Linear::collect(std::vector<Parameter *> &out) {
  out.push_back(&weight_);
  if (has_bias_)
    out.push_back(&bias_);
}

void Linear::state(std::vector<NamedTensor> &out) {
  out.emplace_back(weight_.name, &weight_.value);
  if (has_bias_)
    out.emplace_back(bias_.name, &bias_.value);
}

BatchNorm2d::BatchNorm2d(const std::string &name, std::size_t channels,
                         double momentum)
    : gamma_(name + ".gamma", Tensor({channels}, 1.0)),
      beta_(name + ".beta", Tensor({channels}, 0.0)),
      running_mean_({channels}, 0.0), running_var_({channels}, 1.0),
      momentum_(momentum) {}

Var BatchNorm2d::train_forward(const Var &x) {
  Tensor mu, var;
  Var y = ag::batchnorm_train(x, gamma_.use(), beta_.use(), kEps, &mu, &var);
  for (std::size_t c = 0; c < mu.numel(); ++c) {
    running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mu[c];
    running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var[c];
  }
  return y;
}

Var BatchNorm2d::eval_forward(const Var &x) const {
  return ag::batchnorm_eval(x, gamma_.use(), beta_.use(), running_mean_,
                            running_var_, kEps);
}

void BatchNorm2d::collect(std::vector<Parameter *> &out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm2d::state(std::vector<NamedTensor> &out) {
  const std::string base = gamma_.name.substr(0, gamma_.name.rfind('.'));
  out.emplace_back(gamma_.name, &gamma_.value);
  out.emplace_back(beta_.name, &beta_.value);
  out.emplace_back(base + ".running_mean", &running_mean_);
  out.emplace_back(base + ".running_var", &running_var_);
}

// ------------------------------------------------------------ classifier

Classifier::Classifier(const ClassifierSpec &spec, std::uint64_t seed)
    : spec_(spec) {
  if (spec.num_classes == 0)
    throw ConfigError("classifier: num_classes must be positive");
  if (spec.image_size < 4)
    throw ConfigError("classifier: image_size must be at least 4");
  Rng rng(seed);
  convs_.emplace_back("stem.conv", spec.in_channels, spec.stem_width, 3, 1, 1,
                      rng, false);
  bns_.emplace_back("stem.bn", spec.stem_width);
  std::size_t prev = spec.stem_width;
  for (std::size_t k = 0; k < kStages; ++k) {
    const std::string s = "stage" + std::to_string(k + 1);
    const std::size_t w = spec.widths[k];
    convs_.emplace_back(s + ".conv1", prev, w, 3, 2, 1, rng, false);
    bns_.emplace_back(s + ".bn1", w);
    convs_.emplace_back(s + ".conv2", w, w, 3, 1, 1, rng, false);
    bns_.emplace_back(s + ".bn2", w);
    prev = w;
  }
  head_ = Linear("head", prev, spec.num_classes, rng);
  for (std::size_t k = 0; k + 1 < kStages; ++k) {
    Tensor p({spec.num_classes, spec.widths[k]});
    const double sd = 1.0 / std::sqrt(static_cast<double>(spec.widths[k]));
    for (auto &v : p.vec())
      v = rng.normal() * sd;
    projections_[k] =
        Parameter("proj" + std::to_string(k + 1) + ".weight", std::move(p));
  }
}

ClassifierOutput Classifier::run(const Var &x, Mode mode, bool collect) {
  require(x.shape().size() == 4 && x.dim(1) == spec_.in_channels &&
              x.dim(2) == spec_.image_size && x.dim(3) == spec_.image_size,
          "classifier '" + spec_.name + "': expected input [N," +
              std::to_string(spec_.in_channels) + "," +
              std::to_string(spec_.image_size) + "," +
              std::to_string(spec_.image_size) + "], got " +
              shape_str(x.shape()));
  ClassifierOutput out;
  auto block = [&](std::size_t i, const Var &in) {
    Var pre = convs_[i](in);
    if (collect)
      out.bn_moments.push_back({ag::channel_mean(pre), ag::channel_var(pre)});
    Var y = mode == Mode::Train ? bns_[i].train_forward(pre)
                                : bns_[i].eval_forward(pre);
    return ag::relu(y);
  };
  Var h = block(0, x);
  for (std::size_t k = 0; k < kStages; ++k) {
    h = block(1 + 2 * k, h);
    h = block(2 + 2 * k, h);
    out.taps.push_back(h);
  }
  out.logits = head_(ag::global_avg_pool(h));
  return out;
}

ClassifierOutput Classifier::train_forward(const Var &x) {
  return run(x, Mode::Train, false);
}

ClassifierOutput Classifier::forward(const Var &x, bool collect) const {
  // Eval mode never touches running statistics.
  return const_cast<Classifier *>(this)->run(x, Mode::Eval, collect);
}

std::vector<Parameter *> Classifier::parameters() {
  std::vector<Parameter *> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(out);
    bns_[i].collect(out);
  }
  head_.collect(out);
  for (auto &p : projections_)
    out.push_back(&p);
  return out;
}

std::vector<NamedTensor> Classifier::state() {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].state(out);
    bns_[i].state(out);
  }
  head_.state(out);
  for (auto &p : projections_)
    out.emplace_back(p.name, &p.value);
  return out;
}

std::vector<BNLayerStats> Classifier::bn_layers() const {
  std::vector<BNLayerStats> out;
  for (std::size_t i = 0; i < bns_.size(); ++i)
    out.push_back(bns_[i].stats(i));
  return out;
}

const Parameter &Classifier::tap_projection(std::size_t k) const {
  require(k < kStages, "tap_projection: stage index out of range");
  return k + 1 == kStages ? head_.weight() : projections_[k];
}

std::uint64_t Classifier::parameter_checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (Parameter *p : const_cast<Classifier *>(this)->parameters())
    mix_tensor(h, p->value);
  return h;
}

std::uint64_t Classifier::bn_checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto &s : bn_layers()) {
    mix_tensor(h, s.running_mean);
    mix_tensor(h, s.running_var);
  }
  return h;
}

std::vector<BatchMoments> extract_batch_stats(const Classifier &net,
                                              const Var &images) {
  return net.forward(images, true).bn_moments;
}

// -------------------------------------------------------------- denoiser

namespace {
constexpr std::size_t kTimeFeatures = 16;

Tensor time_features(const std::vector<int> &ts, int num_steps) {
  Tensor f({ts.size(), kTimeFeatures});
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double t = static_cast<double>(ts[i]) / num_steps * 100.0;
    for (std::size_t j = 0; j < kTimeFeatures / 2; ++j) {
      const double freq = std::pow(100.0, -static_cast<double>(j) /
                                              (kTimeFeatures / 2));
      f[i * kTimeFeatures + j] = std::sin(t * freq);
      f[i * kTimeFeatures + kTimeFeatures / 2 + j] = std::cos(t * freq);
    }
  }
  return f;
}
} // namespace

Denoiser::Denoiser(const DenoiserSpec &spec, std::uint64_t seed) : spec_(spec) {
  if (spec.num_classes == 0 || spec.width == 0 || spec.num_steps < 1)
    throw ConfigError("denoiser: invalid spec");
  if (spec.size % 2 != 0)
    throw ConfigError("denoiser: latent size must be even");
  Rng rng(seed);
  const std::size_t w = spec.width, c = spec.channels;
  time1_ = Linear("time1", kTimeFeatures, w, rng);
  time2_ = Linear("time2", w, w, rng);
  emb_down_ = Linear("emb_down", w, 2 * w, rng);
  Tensor table({spec.num_classes + 1, w});
  for (auto &v : table.vec())
    v = rng.normal() * 0.5;
  class_table_ = Parameter("class_table", std::move(table));
  conv_in_ = Conv2d("conv_in", c, w, 3, 1, 1, rng);
  conv_a_ = Conv2d("conv_a", w, w, 3, 1, 1, rng);
  conv_b_ = Conv2d("conv_b", w, w, 3, 1, 1, rng);
  conv_c_ = Conv2d("conv_c", w, 2 * w, 3, 1, 1, rng);
  conv_d_ = Conv2d("conv_d", 2 * w, 2 * w, 3, 1, 1, rng);
  conv_e_ = Conv2d("conv_e", 3 * w, w, 3, 1, 1, rng);
  conv_out_ = Conv2d("conv_out", w, c, 3, 1, 1, rng);
  if (spec.zero_init_output)
    for (Parameter *p : [&] {
           std::vector<Parameter *> v;
           conv_out_.collect(v);
           return v;
         }())
      p->value.fill(0.0);
}

Var Denoiser::forward(const Var &z, int timestep,
                      const std::vector<int> &conditions) const {
  return forward(z, std::vector<int>(conditions.size(), timestep), conditions);
}

Var Denoiser::forward(const Var &z, const std::vector<int> &timesteps,
                      const std::vector<int> &conditions) const {
  require(z.shape().size() == 4 && z.dim(1) == spec_.channels &&
              z.dim(2) == spec_.size && z.dim(3) == spec_.size,
          "denoiser: latent shape " + shape_str(z.shape()) +
              " does not match spec");
  const std::size_t n = z.dim(0);
  require(timesteps.size() == n && conditions.size() == n,
          "denoiser: one timestep and one condition per item required");
  for (int c : conditions)
    require(c >= 0 && c < condition_vocab(),
            "denoiser: unknown condition id " + std::to_string(c));
  Var e = ag::silu(time2_(ag::silu(
      time1_(Var::constant(time_features(timesteps, spec_.num_steps))))));
  e = ag::add(e, ag::gather_rows(class_table_.use(), conditions));

  Var h0 = conv_in_(z);
  Var h1 = ag::silu(ag::add_channel_bias(conv_a_(ag::silu(h0)), e));
  h1 = ag::silu(ag::add(conv_b_(h1), h0));
  Var h2 = ag::silu(ag::add_channel_bias(conv_c_(ag::avg_pool2(h1)),
                                         emb_down_(e)));
  h2 = ag::silu(conv_d_(h2));
  Var h3 = ag::silu(conv_e_(ag::concat_channels(ag::upsample_nearest2(h2), h1)));
  return conv_out_(h3);
}

std::vector<Parameter *> Denoiser::parameters() {
  std::vector<Parameter *> out;
  time1_.collect(out);
  time2_.collect(out);
  emb_down_.collect(out);
  out.push_back(&class_table_);
  for (Conv2d *c : {&conv_in_, &conv_a_, &conv_b_, &conv_c_, &conv_d_,
                    &conv_e_, &conv_out_})
    c->collect(out);
  return out;
}

std::vector<NamedTensor> Denoiser::state() {
  std::vector<NamedTensor> out;
  time1_.state(out);
  time2_.state(out);
  emb_down_.state(out);
  out.emplace_back(class_table_.name, &class_table_.value);
  for (Conv2d *c : {&conv_in_, &conv_a_, &conv_b_, &conv_c_, &conv_d_,
                    &conv_e_, &conv_out_})
    c->state(out);
  return out;
}

std::uint64_t Denoiser::parameter_checksum() const {
  return state_checksum(const_cast<Denoiser *>(this)->state());
}

// ----------------------------------------------------------------- codec

AutoencoderCodec::AutoencoderCodec(std::size_t image_channels,
                                   std::size_t latent_channels,
                                   std::uint64_t seed)
    : image_channels_(image_channels), latent_channels_(latent_channels) {
  Rng rng(seed);
  enc1_ = Conv2d("enc1", image_channels, 16, 3, 2, 1, rng);
  enc2_ = Conv2d("enc2", 16, latent_channels, 3, 1, 1, rng);
  dec1_ = Conv2d("dec1", latent_channels, 16, 3, 1, 1, rng);
  dec2_ = Conv2d("dec2", 16, image_channels, 3, 1, 1, rng);
}

Shape AutoencoderCodec::latent_shape(const Shape &s) const {
  require(s.size() == 4 && s[1] == image_channels_ && s[2] % 2 == 0 &&
              s[3] % 2 == 0,
          "autoencoder codec: unsupported image shape " + shape_str(s));
  return {s[0], latent_channels_, s[2] / 2, s[3] / 2};
}

Var AutoencoderCodec::encode_raw(const Var &x) const {
  return enc2_(ag::silu(enc1_(x)));
}

Var AutoencoderCodec::decode_raw(const Var &z) const {
  return dec2_(ag::silu(dec1_(ag::upsample_nearest2(z))));
}

std::vector<Parameter *> AutoencoderCodec::parameters() {
  std::vector<Parameter *> out;
  for (Conv2d *c : {&enc1_, &enc2_, &dec1_, &dec2_})
    c->collect(out);
  return out;
}

std::vector<NamedTensor> AutoencoderCodec::state() {
  std::vector<NamedTensor> out;
  for (Conv2d *c : {&enc1_, &enc2_, &dec1_, &dec2_})
    c->state(out);
  return out;
}

Var Codec::encode(const Var &x) const {
  Var z = encode_raw(x);
  return latent_scale_ == 1.0 ? z : ag::scale(z, latent_scale_);
}

Var Codec::decode(const Var &z) const {
  return decode_raw(latent_scale_ == 1.0 ? z : ag::scale(z, 1.0 / latent_scale_));
}

void Codec::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s))
    throw ConfigError("codec: latent scale must be positive and finite");
  latent_scale_ = s;
}

std::unique_ptr<Codec> make_codec(const std::string &kind,
                                  std::size_t image_channels,
                                  std::size_t latent_channels,
                                  std::uint64_t seed) {
  if (kind == "identity")
    return std::make_unique<IdentityCodec>();
  if (kind == "autoencoder")
    return std::make_unique<AutoencoderCodec>(image_channels, latent_channels,
                                              seed);
  throw ConfigError("unknown codec kind '" + kind + "'");
}

// ------------------------------------------------------------------ adam

Adam::Adam(std::vector<Parameter *> params, double lr, double beta1,
           double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  for (Parameter *p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Parameter *p : params_)
    p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor &w = params_[i]->value;
    const Tensor &g = params_[i]->grad;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
      w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

} // namespace dfkd
