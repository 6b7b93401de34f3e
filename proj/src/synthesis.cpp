// SPDX-License-Identifier: Apache-2.0
#include "synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>

namespace dfkd {

namespace fs = std::filesystem;

Augmentation parse_augmentation(const std::string &s) {
  if (s == "none")
    return Augmentation::None;
  if (s == "traditional")
    return Augmentation::Traditional;
  if (s == "mixup")
    return Augmentation::MixUp;
  if (s == "cutmix")
    return Augmentation::CutMix;
  throw ConfigError("unknown augmentation '" + s +
                    "' (expected none, traditional, mixup or cutmix)");
}

std::string to_string(Augmentation a) {
  switch (a) {
  case Augmentation::None:
    return "none";
  case Augmentation::Traditional:
    return "traditional";
  case Augmentation::MixUp:
    return "mixup";
  case Augmentation::CutMix:
    return "cutmix";
  }
  return "none";
}

int default_lca_period(int total_steps) {
  return std::max(1, (total_steps + 3) / 4);
}

int SynthesisConfig::period() const {
  return lca_period > 0 ? lca_period : default_lca_period(total_steps);
}

void SynthesisConfig::validate() const {
  if (total_steps < 1)
    throw ConfigError("synthesis: total_steps must be >= 1");
  if (lca_period < 0 || period() > total_steps)
    throw ConfigError("synthesis: lca_period must lie in [1, total_steps]");
  if (rounds < 1)
    throw ConfigError("synthesis: rounds must be >= 1");
  if (batch_size < 1)
    throw ConfigError("synthesis: batch_size must be >= 1");
  if (edit_steps_per_t < 1)
    throw ConfigError("synthesis: edit_steps_per_t must be >= 1");
  if (!(lca_area_max > 0.0 && lca_area_max <= 1.0))
    throw ConfigError("synthesis: lca_area_max must lie in (0, 1]");
  if (!(x0_clip >= 0.0))
    throw ConfigError("synthesis: x0_clip must be >= 0");
  if (gamma_ramp_rounds < 1)
    throw ConfigError("synthesis: gamma_ramp_rounds must be >= 1");
  if (!(guidance.scale >= 1.0))
    throw ConfigError("synthesis: guidance scale must be >= 1");
  weights.validate();
}

std::vector<int> harvest_timesteps(int total_steps, int period) {
  if (total_steps < 1 || period < 1 || period > total_steps)
    throw ConfigError("harvest_timesteps: need 1 <= k <= T (T=" +
                      std::to_string(total_steps) +
                      ", k=" + std::to_string(period) + ")");
  std::vector<int> out;
  for (int t = (total_steps - 1) / period * period; t >= 0; t -= period)
    out.push_back(t);
  return out;
}

std::vector<int> augmentation_timesteps(int total_steps, int period) {
  auto h = harvest_timesteps(total_steps, period);
  h.pop_back();
  return h;
}

double ramped_gamma(double gamma, int round_index, int ramp_rounds) {
  const double r = std::max(1, ramp_rounds);
  return gamma * std::min(1.0, (round_index + 1) / r);
}

Var guided_noise(const Denoiser &denoiser, const Var &z, int t,
                 const std::vector<int> &conditions, const GuidanceSpec &g) {
  if (g.scale == 1.0)
    return denoiser.forward(z, t, conditions);
  const std::size_t n = z.dim(0);
  std::vector<int> both(conditions);
  both.resize(2 * n, g.null_condition);
  Var eps = denoiser.forward(ag::concat0(z, z), t, both);
  return classifier_free_noise(ag::slice0(eps, 0, n), ag::slice0(eps, n, 2 * n),
                               g);
}

Var guided_x0(const Var &z, const LatentBatch &batch, const GuidedModels &m,
              const GuidanceSpec &g, const EditOptions &opts) {
  const double a = m.schedule.alpha_bar(batch.timestep);
  Var eps = guided_noise(m.denoiser, z, batch.timestep, batch.class_targets, g);
  if (opts.stop_gradient_eps)
    eps = Var::constant(eps.value());
  Var x0 = predict_x0(z, eps, a);
  return opts.x0_clip > 0.0 ? ag::clamp(x0, -opts.x0_clip, opts.x0_clip) : x0;
}

InversionResult latent_inversion_loss(const Var &z, const LatentBatch &batch,
                                      const GuidedModels &m,
                                      const InversionWeights &w,
                                      const GuidanceSpec &g,
                                      const EditOptions &opts) {
  Var images = m.codec.decode(guided_x0(z, batch, m, g, opts));
  return inversion_loss(images, batch.class_targets, m.teacher, m.student, w,
                        opts.bn_layers);
}

namespace {

std::string describe_terms(const InversionBreakdown &b) {
  std::ostringstream os;
  os << "L_bn=" << b.bn << " L_cls=" << b.cls << " L_adv=" << b.adv
     << " total=" << b.total;
  return os.str();
}

void clip_items(Tensor &g, double max_norm) {
  const std::size_t n = g.dim(0), inner = g.numel() / n;
  for (std::size_t i = 0; i < n; ++i) {
    double *row = g.data() + i * inner;
    double sq = 0.0;
    for (std::size_t j = 0; j < inner; ++j)
      sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
      const double s = max_norm / norm;
      for (std::size_t j = 0; j < inner; ++j)
        row[j] *= s;
    }
  }
}

} // namespace

LatentBatch edit_latent(const LatentBatch &z, const GuidedModels &m,
                        const InversionWeights &w, const GuidanceSpec &g,
                        const EditOptions &opts,
                        std::vector<InversionBreakdown> *log) {
  if (w.eta == 0.0)
    return z;
  if (z.timestep < 1 || z.timestep > m.schedule.num_steps())
    throw ContractError("edit_latent: timestep " + std::to_string(z.timestep) +
                        " outside [1, T]");
  LatentBatch cur = z;
  NoParamGradGuard guard;
  for (int s = 0; s < std::max(1, opts.steps); ++s) {
    Var zin = Var::input(cur.data);
    InversionResult r = latent_inversion_loss(zin, cur, m, w, g, opts);
    if (log)
      log->push_back(r.terms);
    backward(r.total);
    Tensor grad = zin.grad();
    if (!grad.all_finite())
      throw NumericError("edit_latent: non-finite gradient at t=" +
                         std::to_string(cur.timestep) + " (" +
                         describe_terms(r.terms) + ")");
    if (opts.grad_clip > 0.0)
      clip_items(grad, opts.grad_clip);
    for (std::size_t i = 0; i < grad.numel(); ++i)
      cur.data[i] -= w.eta * grad[i];
  }
  return cur;
}

MixRecord cutmix_box(std::size_t height, std::size_t width, double lambda,
                     Rng &rng) {
  require(lambda >= 0.0 && lambda <= 1.0, "cutmix_box: lambda outside [0,1]");
  const double r = std::sqrt(lambda);
  const auto bh = std::min(height, static_cast<std::size_t>(std::lround(height * r)));
  const auto bw = std::min(width, static_cast<std::size_t>(std::lround(width * r)));
  MixRecord mix;
  mix.lambda = lambda;
  mix.h0 = static_cast<std::size_t>(rng.randint(0, static_cast<long>(height - bh)));
  mix.w0 = static_cast<std::size_t>(rng.randint(0, static_cast<long>(width - bw)));
  mix.h1 = mix.h0 + bh;
  mix.w1 = mix.w0 + bw;
  return mix;
}

void apply_box(Tensor &data, const Tensor &source, const MixRecord &mix) {
  require_same_shape(data, source, "apply_box");
  const std::size_t c = data.dim(1), h = data.dim(2), w = data.dim(3);
  require(mix.target < data.dim(0) && mix.partner < data.dim(0) &&
              mix.h1 <= h && mix.w1 <= w,
          "apply_box: box or item index out of range");
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = mix.h0; y < mix.h1; ++y)
      for (std::size_t x = mix.w0; x < mix.w1; ++x)
        data[((mix.target * c + ch) * h + y) * w + x] =
            source[((mix.partner * c + ch) * h + y) * w + x];
}

namespace {

// Random partner j != i, restricted to the same class when requested.
std::optional<std::size_t> pick_partner(const std::vector<int> &labels,
                                        std::size_t i, bool within_class,
                                        Rng &rng) {
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (j != i && (!within_class || labels[j] == labels[i]))
      pool.push_back(j);
  if (pool.empty())
    return std::nullopt;
  return pool[static_cast<std::size_t>(
      rng.randint(0, static_cast<long>(pool.size()) - 1))];
}

} // namespace

std::pair<LatentBatch, MixMetadata> latent_cutmix(const LatentBatch &batch,
                                                  Rng &rng, double area_max,
                                                  bool within_class) {
  require(batch.data.rank() == 4, "latent_cutmix: expected [N,C,H,W] latents");
  require(batch.class_targets.size() == batch.size(),
          "latent_cutmix: one class target per item required");
  require(area_max > 0.0 && area_max <= 1.0,
          "latent_cutmix: area_max must lie in (0, 1]");
  MixMetadata meta;
  LatentBatch out = batch;
  if (batch.size() < 2) {
    meta.identity_warning = true;
    return {out, meta};
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto partner = pick_partner(batch.class_targets, i, within_class, rng);
    if (!partner)
      continue;
    MixRecord mix = cutmix_box(batch.data.dim(2), batch.data.dim(3),
                               rng.uniform(0.0, area_max), rng);
    mix.target = i;
    mix.partner = *partner;
    apply_box(out.data, batch.data, mix);
    meta.mixes.push_back(mix);
  }
  return {out, meta};
}

std::vector<bool> augment_latents(LatentBatch &batch, Augmentation kind,
                                  Rng &rng, double area_max, bool within_class,
                                  MixMetadata *meta) {
  const std::size_t n = batch.size();
  std::vector<bool> applied(n, false);
  switch (kind) {
  case Augmentation::None:
    break;
  case Augmentation::CutMix: {
    auto [mixed, m] = latent_cutmix(batch, rng, area_max, within_class);
    for (const auto &r : m.mixes)
      applied[r.target] = true;
    batch = std::move(mixed);
    if (meta)
      *meta = std::move(m);
    break;
  }
  case Augmentation::MixUp: {
    const Tensor src = batch.data;
    const std::size_t inner = src.numel() / std::max<std::size_t>(1, n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = pick_partner(batch.class_targets, i, within_class, rng);
      if (!p)
        continue;
      const double lam = rng.beta(1.0, 1.0);
      for (std::size_t j = 0; j < inner; ++j)
        batch.data[i * inner + j] =
            lam * src[i * inner + j] + (1.0 - lam) * src[*p * inner + j];
      applied[i] = true;
    }
    break;
  }
  case Augmentation::Traditional: {
    // Horizontal flip with p = 0.5 and a shift of up to one pixel per axis
    // (edges replicated).
    const Tensor src = batch.data;
    const std::size_t c = src.dim(1), h = src.dim(2), w = src.dim(3);
    for (std::size_t i = 0; i < n; ++i) {
      const bool flip = rng.uniform() < 0.5;
      const long dy = rng.randint(-1, 1), dx = rng.randint(-1, 1);
      applied[i] = flip || dy != 0 || dx != 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const long sy = std::clamp<long>(static_cast<long>(y) - dy, 0,
                                             static_cast<long>(h) - 1);
            long sx = std::clamp<long>(static_cast<long>(x) - dx, 0,
                                       static_cast<long>(w) - 1);
            if (flip)
              sx = static_cast<long>(w) - 1 - sx;
            batch.data[((i * c + ch) * h + y) * w + x] =
                src[((i * c + ch) * h + sy) * w + sx];
          }
    }
    break;
  }
  }
  return applied;
}

namespace {

struct StepImages {
  Tensor eps, x0, images, teacher_logits;
  InversionBreakdown terms;
};

// Guided prediction and loss breakdown at the current latents, no gradients.
StepImages evaluate_step(const LatentBatch &zb, const GuidedModels &m,
                         const InversionWeights &w, const GuidanceSpec &g,
                         const EditOptions &opts) {
  NoParamGradGuard guard;
  StepImages s;
  s.eps = guided_noise(m.denoiser, Var::constant(zb.data), zb.timestep,
                       zb.class_targets, g)
              .value();
  s.x0 = predict_x0(zb.data, s.eps, m.schedule.alpha_bar(zb.timestep));
  if (opts.x0_clip > 0.0)
    for (auto &v : s.x0.vec())
      v = std::clamp(v, -opts.x0_clip, opts.x0_clip);
  if (!s.x0.all_finite())
    throw NumericError("generate_round: non-finite clean-latent prediction at t=" +
                       std::to_string(zb.timestep));
  s.images = m.codec.decode(Var::constant(s.x0)).value();
  InversionResult r = inversion_loss(Var::constant(s.images), zb.class_targets,
                                     m.teacher, m.student, w, opts.bn_layers);
  s.terms = r.terms;
  s.teacher_logits = r.teacher_logits.value();
  return s;
}

void harvest(RoundResult &out, const Tensor &images, const Tensor &logits,
             const std::vector<int> &labels, const std::vector<bool> &mixed,
             int t, int round, std::uint64_t seed) {
  const std::size_t n = images.dim(0), k = logits.dim(1);
  const std::size_t inner = images.numel() / n;
  const Shape item(images.shape().begin() + 1, images.shape().end());
  for (std::size_t i = 0; i < n; ++i) {
    const double *row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      z += std::exp(row[j] - mx);
    SyntheticRecord r;
    r.image = Tensor(item, std::vector<double>(images.data() + i * inner,
                                               images.data() + (i + 1) * inner));
    r.label = labels[i];
    r.harvest_t = t;
    r.round = round;
    r.teacher_confidence = std::exp(row[labels[i]] - mx) / z;
    r.seed = seed;
    r.lca_applied = mixed[i];
    out.records.push_back(std::move(r));
  }
}

} // namespace

RoundResult generate_round(int round_index, const GuidedModels &m,
                           const SynthesisConfig &cfg) {
  cfg.validate();
  const int T = cfg.total_steps;
  if (m.schedule.num_steps() != T)
    throw ConfigError("generate_round: schedule has " +
                      std::to_string(m.schedule.num_steps()) +
                      " steps, config asks for " + std::to_string(T));
  const auto classes = static_cast<int>(m.teacher.num_classes());
  if (m.denoiser.spec().num_classes < m.teacher.num_classes())
    throw ConfigError("generate_round: denoiser knows fewer classes than the teacher");

  InversionWeights w = cfg.weights;
  w.gamma = ramped_gamma(w.gamma, round_index, cfg.gamma_ramp_rounds);
  if (w.gamma != 0.0 && !m.student)
    throw ContractError("generate_round: gamma > 0 requires a student");
  GuidanceSpec g = cfg.guidance;
  g.null_condition = m.denoiser.null_condition();
  EditOptions edit{cfg.edit_steps_per_t, cfg.grad_clip, cfg.stop_gradient_eps,
                   cfg.x0_clip, cfg.bn_layers};

  const int k = cfg.period();
  const auto harvest_set = harvest_timesteps(T, k);
  const auto aug_set = augmentation_timesteps(T, k);
  auto contains = [](const std::vector<int> &v, int t) {
    return std::find(v.begin(), v.end(), t) != v.end();
  };

  const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(round_index));
  const auto &ds = m.denoiser.spec();
  const std::size_t n = cfg.batch_size;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));

  RoundResult out;
  out.student_checksum = m.student ? m.student->parameter_checksum() : 0;
  Rng init(derive_seed(seed, 1));
  Tensor z = init.normal_tensor({n, ds.channels, ds.size, ds.size});
  std::vector<bool> mixed(n, false);

  for (int t = T; t >= 1; --t) {
    LatentBatch zb{z, t, labels, seed};
    zb = edit_latent(zb, m, w, g, edit);
    if (contains(aug_set, t)) {
      Rng arng(derive_seed(seed, 0x100 + static_cast<std::uint64_t>(t)));
      const auto flags = augment_latents(zb, cfg.augmentation, arng,
                                         cfg.lca_area_max,
                                         !cfg.cross_class_pairs);
      for (std::size_t i = 0; i < n; ++i)
        mixed[i] = mixed[i] || flags[i];
      out.augmentation_calls.push_back(t);
    }
    const StepImages step = evaluate_step(zb, m, w, g, edit);
    out.losses.push_back({round_index, t, step.terms});
    if (cfg.harvest_intermediates && contains(harvest_set, t))
      harvest(out, step.images, step.teacher_logits, labels, mixed, t,
              round_index, seed);
    Tensor noise =
        cfg.deterministic_noise
            ? step.eps
            : Rng(derive_seed(seed, 0x200 + static_cast<std::uint64_t>(t)))
                  .normal_tensor(z.shape());
    z = ancestral_step(step.x0, m.schedule, t, noise);
  }
  if (!z.all_finite())
    throw NumericError("generate_round: non-finite final latent");
  NoParamGradGuard guard;
  const Tensor images = m.codec.decode(Var::constant(z)).value();
  const Tensor logits = m.teacher.forward(Var::constant(images)).logits.value();
  harvest(out, images, logits, labels, mixed, 0, round_index, seed);
  return out;
}

void write_round(const fs::path &dir, const RoundResult &round,
                 Manifest &manifest) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec)
    throw IoError("cannot create " + (dir / "images").string());
  std::size_t j = 0;
  for (const auto &r : round.records) {
    char name[64];
    std::snprintf(name, sizeof name, "images/r%03d_t%02d_%04zu.pfm", r.round,
                  r.harvest_t, j++);
    write_pfm(dir / name, r.image);
    ManifestRecord mr;
    mr.path = name;
    mr.label = r.label;
    mr.harvest_t = r.harvest_t;
    mr.round = r.round;
    mr.teacher_confidence = r.teacher_confidence;
    mr.lca_applied = r.lca_applied;
    mr.seed = r.seed;
    manifest.records.push_back(mr);
  }
}

BuildResult build_dataset(const GuidedModels &m, const SynthesisConfig &cfg,
                          const BuildOptions &opts) {
  cfg.validate();
  BuildResult out;
  out.manifest.config_hash = opts.config_hash;
  // Stays invalid until every round is on disk.
  out.manifest.valid = false;
  try {
    write_manifest(opts.out_dir, out.manifest);
    for (int r = 0; r < cfg.rounds; ++r) {
      GuidedModels mr = m;
      if (opts.student_for_round)
        mr.student = opts.student_for_round(r);
      RoundResult round = generate_round(r, mr, cfg);
      write_round(opts.out_dir, round, out.manifest);
      write_manifest(opts.out_dir, out.manifest);
      out.losses.insert(out.losses.end(), round.losses.begin(),
                        round.losses.end());
      if (opts.after_round)
        opts.after_round(r, round);
    }
    out.manifest.valid = true;
    write_manifest(opts.out_dir, out.manifest);
  } catch (...) {
    try {
      invalidate_manifest(opts.out_dir, opts.config_hash);
    } catch (...) {
    }
    throw;
  }
  return out;
}

} // namespace dfkd
