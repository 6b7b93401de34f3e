// SPDX-License-Identifier: Apache-2.0
#include "checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dfkd {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host order; little-endian only");

namespace {
constexpr char kMagic[8] = {'D', 'F', 'K', 'D', 'C', 'K', 'P', 'T'};

template <typename T> void put(std::string &buf, const T &v) {
  buf.append(reinterpret_cast<const char *>(&v), sizeof v);
}

template <typename T> T get(const std::string &buf, std::size_t &pos) {
  if (pos + sizeof(T) > buf.size())
    throw IoError("checkpoint truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

std::string slurp(const fs::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open checkpoint " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}
} // namespace

void save_checkpoint(const fs::path &path, const CheckpointMeta &meta,
                     const std::vector<NamedTensor> &state) {
  json header;
  header["arch"] = meta.arch;
  header["spec"] = meta.spec;
  header["config_hash"] = meta.config_hash;
  header["seed"] = meta.seed;
  header["extra"] = meta.extra;
  json table = json::array();
  std::size_t offset = 0;
  for (const auto &[name, t] : state) {
    table.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel();
  }
  header["tensors"] = table;
  const std::string htext = header.dump();

  std::string buf(kMagic, sizeof kMagic);
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(htext.size()));
  buf += htext;
  for (const auto &[name, t] : state)
    buf.append(reinterpret_cast<const char *>(t->data()),
               t->numel() * sizeof(double));
  put(buf, fnv1a(buf.data(), buf.size()));

  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f)
      throw IoError("cannot write checkpoint " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f)
      throw IoError("checkpoint write failed: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot finalise checkpoint " + path.string());
}

RawCheckpoint read_checkpoint(const fs::path &path) {
  const std::string buf = slurp(path);
  if (buf.size() < sizeof kMagic + 4 + 8 + 8 ||
      std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw IoError("not a dfkd checkpoint: " + path.string());
  std::size_t pos = sizeof kMagic;
  const auto version = get<std::uint32_t>(buf, pos);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " in " + path.string());
  std::size_t tail = buf.size() - sizeof(std::uint64_t);
  const auto stored = get<std::uint64_t>(buf, tail);
  if (stored != fnv1a(buf.data(), buf.size() - sizeof(std::uint64_t)))
    throw IoError("checkpoint checksum mismatch: " + path.string());

  const auto hlen = get<std::uint64_t>(buf, pos);
  if (pos + hlen > buf.size())
    throw IoError("checkpoint header truncated: " + path.string());
  const json header = json::parse(buf.substr(pos, hlen));
  pos += hlen;

  RawCheckpoint out;
  out.meta.arch = header.at("arch").get<std::string>();
  out.meta.spec = header.at("spec");
  out.meta.config_hash = header.at("config_hash").get<std::string>();
  out.meta.seed = header.at("seed").get<std::uint64_t>();
  out.meta.extra = header.value("extra", json::object());
  const std::size_t payload = pos;
  for (const auto &e : header.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    const std::size_t begin = payload + off * sizeof(double);
    if (begin + n * sizeof(double) > buf.size() - sizeof(std::uint64_t))
      throw IoError("checkpoint payload truncated: " + path.string());
    std::vector<double> data(n);
    std::memcpy(data.data(), buf.data() + begin, n * sizeof(double));
    out.tensors.emplace(e.at("name").get<std::string>(),
                        Tensor(shape, std::move(data)));
  }
  return out;
}

void apply_checkpoint(const RawCheckpoint &ckpt,
                      const std::vector<NamedTensor> &state) {
  if (ckpt.tensors.size() != state.size())
    throw IoError("checkpoint tensor count mismatch for arch " +
                  ckpt.meta.arch);
  for (const auto &[name, t] : state) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw IoError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != t->shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_str(it->second.shape()) + ", expected " +
                    shape_str(t->shape()));
    *t = it->second;
  }
}

std::string file_hash(const fs::path &path) {
  const std::string buf = slurp(path);
  return hex64(fnv1a(buf.data(), buf.size()));
}

json to_json(const ClassifierSpec &s) {
  return {{"name", s.name},
          {"in_channels", s.in_channels},
          {"image_size", s.image_size},
          {"num_classes", s.num_classes},
          {"stem_width", s.stem_width},
          {"widths", s.widths}};
}

ClassifierSpec classifier_spec_from_json(const json &j) {
  ClassifierSpec s;
  s.name = j.value("name", s.name);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.image_size = j.value("image_size", s.image_size);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.stem_width = j.value("stem_width", s.stem_width);
  if (j.contains("widths"))
    s.widths = j.at("widths").get<std::array<std::size_t, 3>>();
  return s;
}

json to_json(const DenoiserSpec &s) {
  return {{"channels", s.channels},   {"size", s.size},
          {"num_classes", s.num_classes}, {"width", s.width},
          {"num_steps", s.num_steps}, {"zero_init_output", s.zero_init_output}};
}

DenoiserSpec denoiser_spec_from_json(const json &j) {
  DenoiserSpec s;
  s.channels = j.value("channels", s.channels);
  s.size = j.value("size", s.size);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.width = j.value("width", s.width);
  s.num_steps = j.value("num_steps", s.num_steps);
  s.zero_init_output = j.value("zero_init_output", s.zero_init_output);
  return s;
}

void save_classifier(const fs::path &path, Classifier &net,
                     const std::string &config_hash, std::uint64_t seed,
                     const json &extra) {
  save_checkpoint(path, {"classifier/cnn3", to_json(net.spec()), config_hash,
                         seed, extra},
                  net.state());
}

std::unique_ptr<Classifier> load_classifier(const fs::path &path,
                                            CheckpointMeta *meta) {
  const RawCheckpoint raw = read_checkpoint(path);
  if (raw.meta.arch != "classifier/cnn3")
    throw IoError(path.string() + " holds '" + raw.meta.arch +
                  "', expected a classifier");
  auto net = std::make_unique<Classifier>(
      classifier_spec_from_json(raw.meta.spec), raw.meta.seed);
  apply_checkpoint(raw, net->state());
  if (meta)
    *meta = raw.meta;
  return net;
}

void save_denoiser(const fs::path &path, Denoiser &net,
                   const std::string &config_hash, std::uint64_t seed,
                   const json &extra) {
  save_checkpoint(path, {"denoiser/unet1", to_json(net.spec()), config_hash,
                         seed, extra},
                  net.state());
}

std::unique_ptr<Denoiser> load_denoiser(const fs::path &path,
                                        CheckpointMeta *meta) {
  const RawCheckpoint raw = read_checkpoint(path);
  if (raw.meta.arch != "denoiser/unet1")
    throw IoError(path.string() + " holds '" + raw.meta.arch +
                  "', expected a denoiser");
  auto net = std::make_unique<Denoiser>(denoiser_spec_from_json(raw.meta.spec),
                                        raw.meta.seed);
  apply_checkpoint(raw, net->state());
  if (meta)
    *meta = raw.meta;
  return net;
}

void save_codec(const fs::path &path, Codec &codec,
                std::size_t image_channels, std::size_t latent_channels,
                const std::string &config_hash, std::uint64_t seed) {
  save_checkpoint(path,
                  {"codec/" + codec.kind(),
                   {{"image_channels", image_channels},
                    {"latent_channels", latent_channels},
                    {"latent_scale", codec.latent_scale()}},
                   config_hash,
                   seed,
                   json::object()},
                  codec.state());
}

std::unique_ptr<Codec> load_codec(const fs::path &path, CheckpointMeta *meta) {
  const RawCheckpoint raw = read_checkpoint(path);
  if (raw.meta.arch.rfind("codec/", 0) != 0)
    throw IoError(path.string() + " holds '" + raw.meta.arch +
                  "', expected a codec");
  auto codec = make_codec(raw.meta.arch.substr(6),
                          raw.meta.spec.at("image_channels").get<std::size_t>(),
                          raw.meta.spec.at("latent_channels").get<std::size_t>(),
                          raw.meta.seed);
  apply_checkpoint(raw, codec->state());
  codec->set_latent_scale(raw.meta.spec.value("latent_scale", 1.0));
  if (meta)
    *meta = raw.meta;
  return codec;
}

} // namespace dfkd
