// SPDX-License-Identifier: Apache-2.0
#include "lt3r/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lt3r {

namespace {

constexpr char kMagic[4] = {'L', 'T', '3', 'R'};
constexpr std::uint32_t kVersion = 1;

long long shape_numel(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::vector<std::uint8_t> f32_bytes(const Tensor& t) {
  std::vector<std::uint8_t> out(t.data.size() * 4);
  if (!out.empty()) std::memcpy(out.data(), t.data.data(), out.size());
  return out;
}

}  // namespace

void CheckpointArchive::put_f32(const std::string& name, const Tensor& t) {
  items_[name] = Stored{"f32", t.shape, f32_bytes(t), "", ""};
}

void CheckpointArchive::put_fp8(const std::string& name, const fp8::QuantizedTensor& q) {
  const std::string scale_name = name + ".scale";
  Stored codes;
  codes.dtype = "fp8e4m3";
  codes.shape = q.shape;
  codes.bytes.assign(q.codes.begin(), q.codes.end());
  codes.scale_entry = scale_name;
  codes.axis = q.axis == fp8::ScaleAxis::kPerOutputRow ? "per_output_row" : "per_token";
  items_[name] = std::move(codes);

  Tensor scales({q.slice_count()});
  std::copy(q.scales.begin(), q.scales.end(), scales.data.begin());
  put_f32(scale_name, scales);
}

void CheckpointArchive::put_bool(const std::string& name, const std::vector<int>& shape,
                                 const std::vector<std::uint8_t>& bits) {
  if (shape_numel(shape) != static_cast<long long>(bits.size())) {
    throw std::invalid_argument("put_bool: shape/data size mismatch");
  }
  items_[name] = Stored{"bool", shape, bits, "", ""};
}

bool CheckpointArchive::has(const std::string& name) const { return items_.count(name) != 0; }

CheckpointArchive::Entry CheckpointArchive::entry(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("archive: no entry named " + name);
  return Entry{name,
               it->second.dtype,
               it->second.shape,
               0,
               it->second.bytes.size(),
               it->second.scale_entry,
               it->second.axis};
}

std::vector<CheckpointArchive::Entry> CheckpointArchive::entries() const {
  std::vector<Entry> out;
  std::uint64_t offset = 0;
  for (const auto& [name, st] : items_) {  // std::map iterates in name order
    Entry e;
    e.name = name;
    e.dtype = st.dtype;
    e.shape = st.shape;
    e.offset = offset;
    e.nbytes = st.bytes.size();
    e.scale_entry = st.scale_entry;
    e.axis = st.axis;
    offset += e.nbytes;
    out.push_back(std::move(e));
  }
  return out;
}

Tensor CheckpointArchive::get_f32(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("archive: no entry named " + name);
  if (it->second.dtype != "f32") throw std::invalid_argument("archive: " + name + " is not f32");
  Tensor t(it->second.shape);
  if (!it->second.bytes.empty()) {
    std::memcpy(t.data.data(), it->second.bytes.data(), it->second.bytes.size());
  }
  return t;
}

fp8::QuantizedTensor CheckpointArchive::get_fp8(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("archive: no entry named " + name);
  if (it->second.dtype != "fp8e4m3") {
    throw std::invalid_argument("archive: " + name + " is not fp8e4m3");
  }
  fp8::QuantizedTensor q;
  q.shape = it->second.shape;
  q.axis = it->second.axis == "per_token" ? fp8::ScaleAxis::kPerToken
                                          : fp8::ScaleAxis::kPerOutputRow;
  q.codes.assign(it->second.bytes.begin(), it->second.bytes.end());
  Tensor scales = get_f32(it->second.scale_entry);
  q.scales.assign(scales.data.begin(), scales.data.end());
  return q;
}

std::vector<std::uint8_t> CheckpointArchive::get_bool(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("archive: no entry named " + name);
  if (it->second.dtype != "bool") throw std::invalid_argument("archive: " + name + " is not bool");
  return it->second.bytes;
}

void CheckpointArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Entry& e : entries()) {
    nlohmann::json je;
    je["name"] = e.name;
    je["dtype"] = e.dtype;
    je["shape"] = e.shape;
    je["offset"] = e.offset;
    je["nbytes"] = e.nbytes;
    if (!e.scale_entry.empty()) je["scale"] = e.scale_entry;
    if (!e.axis.empty()) je["axis"] = e.axis;
    tensors.push_back(std::move(je));
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("archive: cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, st] : items_) {
    out.write(reinterpret_cast<const char*>(st.bytes.data()),
              static_cast<std::streamsize>(st.bytes.size()));
  }
  if (!out) throw std::runtime_error("archive: write failed for " + path.string());
}

CheckpointArchive CheckpointArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("archive: bad magic in " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || version != kVersion) throw std::runtime_error("archive: unsupported version");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in) throw std::runtime_error("archive: truncated header length");
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("archive: truncated header");

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, /*allow_exceptions=*/false);
  if (header.is_discarded()) throw std::runtime_error("archive: malformed header JSON");

  std::vector<char> payload(std::istreambuf_iterator<char>(in), {});

  CheckpointArchive a;
  a.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expected_offset = 0;
  for (const auto& je : header.at("tensors")) {
    Stored st;
    const std::string name = je.at("name").get<std::string>();
    st.dtype = je.at("dtype").get<std::string>();
    st.shape = je.at("shape").get<std::vector<int>>();
    const std::uint64_t offset = je.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = je.at("nbytes").get<std::uint64_t>();
    st.scale_entry = je.value("scale", "");
    st.axis = je.value("axis", "");
    if (offset != expected_offset) {
      throw std::runtime_error("archive: entry offsets must be ascending and contiguous");
    }
    if (offset + nbytes > payload.size()) {
      throw std::runtime_error("archive: entry " + name + " exceeds payload");
    }
    st.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                    payload.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
    expected_offset = offset + nbytes;
    a.items_.emplace(name, std::move(st));
  }
  if (expected_offset != payload.size()) {
    throw std::runtime_error("archive: payload size does not match manifest");
  }
  return a;
}

// ---------------------------------------------------------------------------
// model <-> archive
// ---------------------------------------------------------------------------

CheckpointArchive checkpoint_from_model(ToyTransformer& model, nlohmann::json extra_meta) {
  CheckpointArchive a;
  nlohmann::json meta;
  meta["format"] = "lt3r-model";
  meta["model"] = {{"layers", model.cfg.layers}, {"dim", model.cfg.dim},
                   {"seq_len", model.cfg.seq_len}, {"d_in", model.cfg.d_in},
                   {"d_out", model.cfg.d_out}};
  meta["attention"] = model.uses_sla() ? "sla" : "dense";
  if (model.uses_sla()) {
    meta["keep_ratio"] = std::get<SlaParams>(model.blocks.front().attn).keep_ratio;
  }
  nlohmann::json quant_layers = nlohmann::json::array();
  bool act_quant = false;
  for (auto& [name, layer] : model.linear_layers()) {
    if (layer->enabled) {
      quant_layers.push_back(name);
      act_quant = act_quant || layer->enable_act_quant;
    }
  }
  meta["quant_layers"] = std::move(quant_layers);
  meta["act_quant"] = act_quant;
  meta["weight_only_layers"] = nlohmann::json::array();
  if (!extra_meta.is_null()) {
    for (auto& [k, v] : extra_meta.items()) meta[k] = v;
  }
  a.meta = std::move(meta);

  for (auto& [name, pg] : model.param_groups()) a.put_f32(name, pg->tensor);
  return a;
}

ToyTransformer model_from_checkpoint(const CheckpointArchive& archive) {
  const nlohmann::json& meta = archive.meta;
  if (meta.value("format", "") != "lt3r-model") {
    throw std::runtime_error("checkpoint: not a model archive");
  }
  ModelConfig cfg;
  const auto& jm = meta.at("model");
  cfg.layers = jm.at("layers").get<int>();
  cfg.dim = jm.at("dim").get<int>();
  cfg.seq_len = jm.at("seq_len").get<int>();
  cfg.d_in = jm.at("d_in").get<int>();
  cfg.d_out = jm.at("d_out").get<int>();

  ToyTransformer model = build_teacher(cfg, /*seed=*/0);
  if (meta.value("attention", "dense") == "sla") {
    model = derive_student(model, meta.value("keep_ratio", 1.0f));
  }

  std::vector<std::string> quant_layers =
      meta.value("quant_layers", std::vector<std::string>{});
  std::vector<std::string> weight_only =
      meta.value("weight_only_layers", std::vector<std::string>{});
  const bool act_quant = meta.value("act_quant", false);

  for (auto& [name, pg] : model.param_groups()) {
    if (!archive.has(name)) {
      throw std::runtime_error("checkpoint: missing entry " + name);
    }
    const CheckpointArchive::Entry e = archive.entry(name);
    if (e.dtype == "fp8e4m3") continue;  // weight-only layers are loaded below
    Tensor t = archive.get_f32(name);
    if (t.shape != pg->tensor.shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    pg->tensor = std::move(t);
  }

  for (auto& [name, layer] : model.linear_layers()) {
    const bool is_weight_only =
        std::find(weight_only.begin(), weight_only.end(), name) != weight_only.end();
    if (is_weight_only) {
      fp8::QuantizedTensor q = archive.get_fp8(name + ".W");
      Tensor w = fp8::dequantize(q);
      if (w.shape != layer->W.tensor.shape) {
        throw std::runtime_error("checkpoint: shape mismatch for " + name + ".W");
      }
      layer->W.tensor = std::move(w);
      layer->enabled = false;  // deployment path: fake-quant modules removed
      continue;
    }
    if (std::find(quant_layers.begin(), quant_layers.end(), name) != quant_layers.end()) {
      layer->enabled = true;
      layer->enable_act_quant = act_quant;
    }
  }
  if (!weight_only.empty()) {
    // exported archives describe deployment models; nothing trains further
    for (auto& [name, pg] : model.param_groups()) pg->trainable = false;
  }
  return model;
}

CheckpointArchive export_fp8_archive(const CheckpointArchive& in) {
  if (in.meta.value("format", "") != "lt3r-model") {
    throw std::runtime_error("export: not a model archive");
  }
  std::vector<std::string> quant_layers =
      in.meta.value("quant_layers", std::vector<std::string>{});
  if (quant_layers.empty()) {
    throw std::runtime_error("export: checkpoint has no quantized layers");
  }

  CheckpointArchive out;
  out.meta = in.meta;
  out.meta["weight_only_layers"] = quant_layers;

  std::vector<std::string> to_quantize;
  for (const std::string& layer : quant_layers) to_quantize.push_back(layer + ".W");

  for (const auto& e : in.entries()) {
    const bool quantize_this =
        std::find(to_quantize.begin(), to_quantize.end(), e.name) != to_quantize.end();
    if (quantize_this && e.dtype == "f32") {
      Tensor w = in.get_f32(e.name);
      out.put_fp8(e.name, fp8::quantize_scaled(w, fp8::ScaleAxis::kPerOutputRow));
    } else if (e.dtype == "f32") {
      out.put_f32(e.name, in.get_f32(e.name));
    } else if (e.dtype == "fp8e4m3") {
      out.put_fp8(e.name, in.get_fp8(e.name));
    } else {
      out.put_bool(e.name, e.shape, in.get_bool(e.name));
    }
  }
  return out;
}

}  // namespace lt3r
