// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lt3r/fp8.hpp"
#include "lt3r/model.hpp"

namespace lt3r {

// Binary tensor archive:
//   magic "LT3R" | u32 LE version | u64 LE header length | header JSON | payload
// The header manifest lists {name, dtype, shape, offset, nbytes[, scale, axis]}
// per entry with offsets ascending and non-overlapping. Entries are kept
// sorted by name and the JSON dump is canonical, so load -> save round-trips
// byte-identically.
class CheckpointArchive {
 public:
  struct Entry {
    std::string name;
    std::string dtype;  // "f32" | "fp8e4m3" | "bool"
    std::vector<int> shape;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
    std::string scale_entry;  // fp8e4m3 only: name of the f32 scale vector
    std::string axis;         // fp8e4m3 only: "per_output_row" | "per_token"
  };

  nlohmann::json meta;

  void put_f32(const std::string& name, const Tensor& t);
  // Writes the code bytes under `name` and the scales under `name + ".scale"`.
  void put_fp8(const std::string& name, const fp8::QuantizedTensor& q);
  void put_bool(const std::string& name, const std::vector<int>& shape,
                const std::vector<std::uint8_t>& bits);

  bool has(const std::string& name) const;
  Entry entry(const std::string& name) const;
  std::vector<Entry> entries() const;  // sorted by name, offsets assigned

  Tensor get_f32(const std::string& name) const;
  fp8::QuantizedTensor get_fp8(const std::string& name) const;
  std::vector<std::uint8_t> get_bool(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static CheckpointArchive load(const std::filesystem::path& path);

 private:
  struct Stored {
    std::string dtype;
    std::vector<int> shape;
    std::vector<std::uint8_t> bytes;
    std::string scale_entry;
    std::string axis;
  };
  std::map<std::string, Stored> items_;
};

// Model <-> archive. Metadata records the architecture, the quantized layer
// set, and (after export) which weights are stored as FP8 codes.
CheckpointArchive checkpoint_from_model(ToyTransformer& model, nlohmann::json extra_meta = {});
ToyTransformer model_from_checkpoint(const CheckpointArchive& archive);

// Converts policy-quantized f32 weights to FP8 codes + scales; everything
// else is copied verbatim. Exporting an already-exported archive is a no-op.
CheckpointArchive export_fp8_archive(const CheckpointArchive& in);

}  // namespace lt3r
