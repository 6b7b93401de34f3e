// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Versioned, self-describing checkpoint container.
 *
 * Layout: 8-byte magic "DFKDCKPT", u32 format version, u64 header length,
 * JSON header (architecture tag, spec, config hash, seed, tensor table),
 * raw little-endian float64 payload, trailing u64 FNV-1a of all prior bytes.
 */
#ifndef DFKD_CHECKPOINT_HPP_
#define DFKD_CHECKPOINT_HPP_

#include "nets.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <string>

namespace dfkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string arch;
  nlohmann::json spec;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct RawCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path &path,
                     const CheckpointMeta &meta,
                     const std::vector<NamedTensor> &state);
RawCheckpoint read_checkpoint(const std::filesystem::path &path);
/// Copies tensors into `state`; names and shapes must match exactly.
void apply_checkpoint(const RawCheckpoint &ckpt,
                      const std::vector<NamedTensor> &state);

/// FNV-1a over a file's bytes, hex encoded.
std::string file_hash(const std::filesystem::path &path);

nlohmann::json to_json(const ClassifierSpec &s);
ClassifierSpec classifier_spec_from_json(const nlohmann::json &j);
nlohmann::json to_json(const DenoiserSpec &s);
DenoiserSpec denoiser_spec_from_json(const nlohmann::json &j);

void save_classifier(const std::filesystem::path &path, Classifier &net,
                     const std::string &config_hash, std::uint64_t seed,
                     const nlohmann::json &extra = nlohmann::json::object());
std::unique_ptr<Classifier> load_classifier(const std::filesystem::path &path,
                                            CheckpointMeta *meta = nullptr);

void save_denoiser(const std::filesystem::path &path, Denoiser &net,
                   const std::string &config_hash, std::uint64_t seed,
                   const nlohmann::json &extra = nlohmann::json::object());
std::unique_ptr<Denoiser> load_denoiser(const std::filesystem::path &path,
                                        CheckpointMeta *meta = nullptr);

void save_codec(const std::filesystem::path &path, Codec &codec,
                std::size_t image_channels, std::size_t latent_channels,
                const std::string &config_hash, std::uint64_t seed);
std::unique_ptr<Codec> load_codec(const std::filesystem::path &path,
                                  CheckpointMeta *meta = nullptr);

} // namespace dfkd

#endif // DFKD_CHECKPOINT_HPP_
