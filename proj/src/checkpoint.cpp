#include "circuit_lens/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace circuit_lens {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are read as little-endian");

void Dims::validate() const {
  if (d_model <= 0 || d_voc <= 0 || n_ctx <= 0 || n_heads <= 0 || d_head <= 0 || d_mlp <= 0)
    fail(ErrorCode::ShapeMismatch, "all dimensions must be positive");
  if (d_model != n_heads * d_head)
    fail(ErrorCode::ShapeMismatch, "d_model must equal n_heads * d_head");
}

Index TensorData::numel() const {
  Index n = 1;
  for (Index s : shape) n *= s;
  return n;
}

// ---------------------------------------------------------------------------
// Name map

NameMap NameMap::parse(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("name map is not valid JSON: ") + e.what());
  }
  NameMap map;
  try {
    for (const auto& [k, v] : doc.at("tensors").items()) map.tensors[k] = v.get<std::string>();
    map.qkv_packed = doc.value("qkv_packed", true);
    if (doc.contains("qkv_order")) {
      const auto order = doc.at("qkv_order").get<std::string>();
      std::string sorted = order;
      std::sort(sorted.begin(), sorted.end());
      if (order.size() != 3 || sorted != "kqv")
        fail(ErrorCode::ConfigError, "qkv_order must be a permutation of \"qkv\"");
      std::copy(order.begin(), order.end(), map.qkv_order.begin());
    }
    const auto layout = doc.value("weight_layout", std::string("in_out"));
    if (layout != "in_out" && layout != "out_in")
      fail(ErrorCode::ConfigError, "weight_layout must be in_out or out_in");
    map.out_in_layout = layout == "out_in";
    if (doc.contains("n_heads")) map.n_heads = doc.at("n_heads").get<Index>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("malformed name map: ") + e.what());
  }
  return map;
}

NameMap NameMap::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ConfigError, "cannot open name map " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string NameMap::to_json() const {
  json doc;
  doc["tensors"] = tensors;
  doc["qkv_packed"] = qkv_packed;
  doc["qkv_order"] = std::string(qkv_order.begin(), qkv_order.end());
  doc["weight_layout"] = out_in_layout ? "out_in" : "in_out";
  if (n_heads) doc["n_heads"] = *n_heads;
  return doc.dump(2);
}

const std::string& NameMap::key(const std::string& canonical) const {
  auto it = tensors.find(canonical);
  if (it == tensors.end()) fail(ErrorCode::MissingTensor, "name map has no entry for " + canonical);
  return it->second;
}

NameMap canonical_name_map(Index n_heads) {
  using namespace tensor_names;
  NameMap map;
  for (const char* name : {kTokenEmbedding, kPosEmbedding, kLn1Weight, kLn1Bias, kQWeight, kKWeight,
                           kVWeight, kQBias, kKBias, kVBias, kAttnOutWeight, kAttnOutBias,
                           kLn2Weight, kLn2Bias, kMlpInWeight, kMlpInBias})
    map.tensors[name] = name;
  map.qkv_packed = false;
  map.n_heads = n_heads;
  return map;
}

// ---------------------------------------------------------------------------
// Container I/O

namespace {

std::size_t element_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  fail(ErrorCode::UnreadableContainer, "unsupported tensor dtype " + dtype);
}

void decode_payload(const char* bytes, std::size_t count, const std::string& dtype,
                    std::vector<double>& out) {
  out.resize(count);
  if (dtype == "F32") {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, bytes + 4 * i, 4);
      out[i] = f;
    }
  } else {
    std::memcpy(out.data(), bytes, 8 * count);
  }
}

std::vector<Index> parse_shape(const json& j) {
  std::vector<Index> shape;
  for (const auto& s : j) shape.push_back(s.get<Index>());
  return shape;
}

bool wanted(const std::vector<std::string>& names, const std::string& name) {
  return names.empty() || std::find(names.begin(), names.end(), name) != names.end();
}

std::map<std::string, TensorData> read_single_file(const fs::path& path,
                                                   const std::vector<std::string>& names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::UnreadableContainer, "cannot open " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  const auto file_size = fs::file_size(path);
  if (!in || header_len == 0 || header_len + 8 > file_size)
    fail(ErrorCode::UnreadableContainer, "bad container header length in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  json doc;
  try {
    doc = json::parse(header);
  } catch (const json::exception& e) {
    fail(ErrorCode::UnreadableContainer, std::string("container header is not JSON: ") + e.what());
  }
  const std::uint64_t data_start = 8 + header_len;
  std::map<std::string, TensorData> out;
  std::vector<char> buffer;
  for (const auto& [name, entry] : doc.items()) {
    if (name == "__metadata__" || !wanted(names, name)) continue;
    try {
      const auto dtype = entry.at("dtype").get<std::string>();
      TensorData t;
      t.shape = parse_shape(entry.at("shape"));
      const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
      const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
      const std::size_t esize = element_size(dtype);
      const auto count = static_cast<std::size_t>(t.numel());
      if (end < begin || end - begin != count * esize || data_start + end > file_size)
        fail(ErrorCode::UnreadableContainer, "inconsistent byte range for tensor " + name);
      buffer.resize(end - begin);
      in.seekg(static_cast<std::streamoff>(data_start + begin));
      in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
      if (!in) fail(ErrorCode::UnreadableContainer, "truncated payload for tensor " + name);
      decode_payload(buffer.data(), count, dtype, t.values);
      out.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      fail(ErrorCode::UnreadableContainer, "malformed header entry " + name + ": " + e.what());
    }
  }
  return out;
}

std::map<std::string, TensorData> read_directory(const fs::path& dir,
                                                 const std::vector<std::string>& names) {
  std::ifstream man(dir / "manifest.json");
  if (!man) fail(ErrorCode::UnreadableContainer, "no manifest.json in " + dir.string());
  json doc;
  try {
    doc = json::parse(man);
  } catch (const json::exception& e) {
    fail(ErrorCode::UnreadableContainer, std::string("manifest.json is not JSON: ") + e.what());
  }
  std::map<std::string, TensorData> out;
  for (const auto& [name, entry] : doc.at("tensors").items()) {
    if (!wanted(names, name)) continue;
    TensorData t;
    std::string dtype, file;
    try {
      dtype = entry.at("dtype").get<std::string>();
      file = entry.at("file").get<std::string>();
      t.shape = parse_shape(entry.at("shape"));
    } catch (const json::exception& e) {
      fail(ErrorCode::UnreadableContainer, "malformed manifest entry " + name + ": " + e.what());
    }
    const auto count = static_cast<std::size_t>(t.numel());
    const std::size_t bytes = count * element_size(dtype);
    std::ifstream in(dir / file, std::ios::binary);
    if (!in || fs::file_size(dir / file) != bytes)
      fail(ErrorCode::UnreadableContainer, "raw array " + file + " missing or wrong size");
    std::vector<char> buffer(bytes);
    in.read(buffer.data(), static_cast<std::streamsize>(bytes));
    decode_payload(buffer.data(), count, dtype, t.values);
    out.emplace(name, std::move(t));
  }
  return out;
}

void encode_payload(const TensorData& t, StorageType storage, std::string& out) {
  if (storage == StorageType::F32) {
    for (double v : t.values) {
      const auto f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
  } else {
    out.append(reinterpret_cast<const char*>(t.values.data()), 8 * t.values.size());
  }
}

const char* dtype_name(StorageType storage) { return storage == StorageType::F32 ? "F32" : "F64"; }

}  // namespace

std::map<std::string, TensorData> read_tensors(const fs::path& path,
                                               const std::vector<std::string>& names) {
  std::error_code ec;
  if (fs::is_directory(path, ec)) return read_directory(path, names);
  if (!fs::is_regular_file(path, ec))
    fail(ErrorCode::UnreadableContainer, "checkpoint not found: " + path.string());
  return read_single_file(path, names);
}

void write_tensor_container(const fs::path& path, const std::map<std::string, TensorData>& tensors,
                            StorageType storage) {
  json header = json::object();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    if (static_cast<std::size_t>(t.numel()) != t.values.size())
      fail(ErrorCode::ShapeMismatch, "tensor " + name + " has inconsistent shape");
    const auto begin = payload.size();
    encode_payload(t, storage, payload);
    header[name] = {{"dtype", dtype_name(storage)}, {"shape", t.shape},
                    {"data_offsets", {begin, payload.size()}}};
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) fail(ErrorCode::Io, "short write to " + path.string());
}

void write_tensor_directory(const fs::path& dir, const std::map<std::string, TensorData>& tensors,
                            StorageType storage) {
  fs::create_directories(dir);
  json manifest;
  manifest["tensors"] = json::object();
  int index = 0;
  for (const auto& [name, t] : tensors) {
    const std::string file = "tensor_" + std::to_string(index++) + ".bin";
    std::string payload;
    encode_payload(t, storage, payload);
    std::ofstream out(dir / file, std::ios::binary);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) fail(ErrorCode::Io, "cannot write " + (dir / file).string());
    manifest["tensors"][name] = {{"dtype", dtype_name(storage)}, {"shape", t.shape}, {"file", file}};
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2);
  if (!out) fail(ErrorCode::Io, "cannot write manifest in " + dir.string());
}

// ---------------------------------------------------------------------------
// Canonical assembly

namespace {

Eigen::MatrixXd as_matrix(const TensorData& t, const std::string& name) {
  if (t.shape.size() == 1) return Eigen::Map<const Eigen::VectorXd>(t.values.data(), t.shape[0]);
  if (t.shape.size() != 2)
    fail(ErrorCode::ShapeMismatch, name + ": expected a 1-D or 2-D tensor");
  return Eigen::Map<const RowMat<double>>(t.values.data(), t.shape[0], t.shape[1]);
}

std::string shape_string(const std::vector<Index>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

// [n_heads, a, b] -> a x (n_heads*b): head blocks laid side by side.
Eigen::MatrixXd heads_side_by_side(const TensorData& t) {
  const Index nh = t.shape[0], a = t.shape[1], b = t.shape[2];
  Eigen::MatrixXd out(a, nh * b);
  for (Index h = 0; h < nh; ++h)
    out.middleCols(h * b, b) = Eigen::Map<const RowMat<double>>(t.values.data() + h * a * b, a, b);
  return out;
}

// [n_heads, a, b] -> (n_heads*a) x b: head blocks stacked.
Eigen::MatrixXd heads_stacked(const TensorData& t) {
  return Eigen::Map<const RowMat<double>>(t.values.data(), t.shape[0] * t.shape[1], t.shape[2]);
}

}  // namespace

RawCheckpoint assemble_checkpoint(const std::map<std::string, TensorData>& container,
                                  const NameMap& map) {
  using namespace tensor_names;
  auto fetch = [&](const char* canonical) -> const TensorData& {
    const std::string& key = map.key(canonical);
    auto it = container.find(key);
    if (it == container.end())
      fail(ErrorCode::MissingTensor, std::string(canonical) + " (container key '" + key + "')");
    return it->second;
  };
  auto weight2d = [&](const TensorData& t, const std::string& name) {
    Eigen::MatrixXd m = as_matrix(t, name);
    if (map.out_in_layout) m.transposeInPlace();
    return m;
  };

  std::map<std::string, Eigen::MatrixXd> tensors;
  tensors[kTokenEmbedding] = as_matrix(fetch(kTokenEmbedding), kTokenEmbedding);
  tensors[kPosEmbedding] = as_matrix(fetch(kPosEmbedding), kPosEmbedding);
  for (const char* name : {kLn1Weight, kLn1Bias, kLn2Weight, kLn2Bias, kMlpInBias, kAttnOutBias})
    tensors[name] = as_matrix(fetch(name), name);
  tensors[kMlpInWeight] = weight2d(fetch(kMlpInWeight), kMlpInWeight);

  std::optional<Index> n_heads = map.n_heads;
  auto note_heads = [&](Index nh, const std::string& source) {
    if (n_heads && *n_heads != nh)
      fail(ErrorCode::ShapeMismatch, source + " implies " + std::to_string(nh) +
                                         " heads, name map declares " + std::to_string(*n_heads));
    n_heads = nh;
  };

  if (map.qkv_packed) {
    const Eigen::MatrixXd w = weight2d(fetch(kQkvWeight), kQkvWeight);
    const Eigen::MatrixXd b = as_matrix(fetch(kQkvBias), kQkvBias);
    if (w.cols() % 3 != 0 || b.size() != w.cols())
      fail(ErrorCode::ShapeMismatch, "packed qkv width " + std::to_string(w.cols()) +
                                         " is not three equal blocks matching its bias");
    const Index width = w.cols() / 3;
    for (int slot = 0; slot < 3; ++slot) {
      const char role = map.qkv_order[static_cast<std::size_t>(slot)];
      const char* wn = role == 'q' ? kQWeight : role == 'k' ? kKWeight : kVWeight;
      const char* bn = role == 'q' ? kQBias : role == 'k' ? kKBias : kVBias;
      tensors[wn] = w.middleCols(slot * width, width);
      tensors[bn] = b.col(0).segment(slot * width, width);
    }
  } else {
    for (auto [wn, bn] : {std::pair{kQWeight, kQBias}, std::pair{kKWeight, kKBias},
                          std::pair{kVWeight, kVBias}}) {
      const TensorData& wt = fetch(wn);
      if (wt.shape.size() == 3) {
        note_heads(wt.shape[0], wn);
        tensors[wn] = heads_side_by_side(wt);
      } else {
        tensors[wn] = weight2d(wt, wn);
      }
      const TensorData& bt = fetch(bn);
      tensors[bn] = Eigen::Map<const Eigen::VectorXd>(bt.values.data(), bt.numel());
    }
  }
  const TensorData& ot = fetch(kAttnOutWeight);
  if (ot.shape.size() == 3) {
    note_heads(ot.shape[0], kAttnOutWeight);
    tensors[kAttnOutWeight] = heads_stacked(ot);
  } else {
    tensors[kAttnOutWeight] = weight2d(ot, kAttnOutWeight);
  }
  if (!n_heads)
    fail(ErrorCode::ShapeMismatch,
         "head count is not recoverable from tensor shapes; declare n_heads in the name map");

  RawCheckpoint raw;
  raw.dims = infer_dims(tensors, *n_heads);
  raw.tensors = std::move(tensors);
  return raw;
}

Dims infer_dims(const std::map<std::string, Eigen::MatrixXd>& tensors, Index n_heads) {
  using namespace tensor_names;
  auto get = [&](const char* name) -> const Eigen::MatrixXd& {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCode::MissingTensor, name);
    return it->second;
  };
  Dims d;
  const auto& tok = get(kTokenEmbedding);
  d.d_voc = tok.rows();
  d.d_model = tok.cols();
  d.n_ctx = get(kPosEmbedding).rows();
  d.d_mlp = get(kMlpInWeight).cols();
  d.n_heads = n_heads;
  if (n_heads <= 0 || d.d_model % n_heads != 0)
    fail(ErrorCode::ShapeMismatch, "d_model " + std::to_string(d.d_model) +
                                       " is not divisible by n_heads " + std::to_string(n_heads));
  d.d_head = d.d_model / n_heads;

  auto expect = [&](const char* name, Index rows, Index cols) {
    const auto& m = get(name);
    if (m.rows() != rows || m.cols() != cols)
      fail(ErrorCode::ShapeMismatch, std::string(name) + ": expected " +
                                         shape_string({rows, cols}) + ", found " +
                                         shape_string({m.rows(), m.cols()}));
  };
  const Index width = n_heads * d.d_head;
  expect(kPosEmbedding, d.n_ctx, d.d_model);
  for (const char* n : {kLn1Weight, kLn1Bias, kLn2Weight, kLn2Bias, kAttnOutBias})
    expect(n, d.d_model, 1);
  for (const char* n : {kQWeight, kKWeight, kVWeight}) expect(n, d.d_model, width);
  for (const char* n : {kQBias, kKBias, kVBias}) expect(n, width, 1);
  expect(kAttnOutWeight, width, d.d_model);
  expect(kMlpInWeight, d.d_model, d.d_mlp);
  expect(kMlpInBias, d.d_mlp, 1);
  d.validate();
  return d;
}

RawCheckpoint load_checkpoint(const fs::path& path, const NameMap& map) {
  std::vector<std::string> keys;
  for (const auto& [canonical, key] : map.tensors) keys.push_back(key);
  return assemble_checkpoint(read_tensors(path, keys), map);
}

const Eigen::MatrixXd& RawCheckpoint::at(const std::string& canonical) const {
  auto it = tensors.find(canonical);
  if (it == tensors.end()) fail(ErrorCode::MissingTensor, canonical);
  return it->second;
}

}  // namespace circuit_lens
