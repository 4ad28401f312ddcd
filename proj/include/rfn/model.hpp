#pragma once

// Full detector assembly: backbone + SFF + CR heads + refinement head, with
// toggle-aware forward paths and a versioned binary checkpoint format.

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rfn/apr.hpp"
#include "rfn/backbone.hpp"
#include "rfn/config.hpp"
#include "rfn/cr_heads.hpp"
#include "rfn/postprocess.hpp"
#include "rfn/sff.hpp"

namespace rfn {

template <typename T>
struct ModelForward {
  FeaturePyramid<T> pyramid;          // backbone outputs X1..X4
  std::vector<nn::Var<T>> reweighted; // X-hat (equals pyramid when SFF is off)
  nn::Var<T> attention;               // A at s1; constant 0.5 map when SFF is off
  std::vector<HeadMaps<T>> heads;     // per-level score/offset maps
};

template <typename T>
class RfnModel {
 public:
  explicit RfnModel(const RunConfig& cfg) : cfg_(cfg) {
    validate_config(cfg);
    store_.rng.seed(static_cast<uint64_t>(cfg.seed) * 0x9E3779B97F4A7C15ull + 0x1234567ull);
    backbone_ = PyramidBackbone<T>(store_, backbone_config(cfg));
    sff_ = Sff<T>(store_, sff_config(cfg));
    heads_ = CrHeads<T>(store_, heads_config(cfg));
    refine_ = RefineHead<T>(store_, refine_config(cfg));
  }

  ModelForward<T> forward(const nn::Tensor<T>& image) const {
    ModelForward<T> out;
    out.pyramid = backbone_.forward(nn::Var<T>::constant(image));
    if (cfg_.toggle_sff) {
      auto sff_out = sff_.forward(out.pyramid);
      out.attention = sff_out.attention;
      for (const auto& lvl : out.pyramid.levels)
        out.reweighted.push_back(apply_attention(lvl, out.attention));
    } else {
      int h1 = out.pyramid.levels[0].value().dim(1);
      int w1 = out.pyramid.levels[0].value().dim(2);
      out.attention = nn::Var<T>::constant(nn::Tensor<T>::full({1, h1, w1}, T(0.5)));
      out.reweighted = out.pyramid.levels;
    }
    out.heads = heads_.forward(out.reweighted);
    return out;
  }

  std::vector<DetectionSet> decode_all(const ModelForward<T>& fwd,
                                       const std::vector<AnchorGrid>& grids) const {
    std::vector<DetectionSet> dets;
    for (size_t li = 0; li < grids.size(); ++li)
      dets.push_back(decode_detections(fwd.heads[li].scores.value(), fwd.heads[li].offsets.value(),
                                       grids[li], static_cast<int>(li) + 1));
    return dets;
  }

  RunConfig& config() { return cfg_; }
  const RunConfig& config() const { return cfg_; }
  nn::ParamStore<T>& store() { return store_; }
  const nn::ParamStore<T>& store() const { return store_; }
  PyramidBackbone<T>& backbone() { return backbone_; }
  const PyramidBackbone<T>& backbone() const { return backbone_; }
  const Sff<T>& sff() const { return sff_; }
  const RefineHead<T>& refine() const { return refine_; }

  void copy_values_from(const RfnModel<T>& other) {
    if (other.store_.params.size() != store_.params.size())
      throw std::logic_error("copy_values_from: model mismatch");
    for (size_t i = 0; i < store_.params.size(); ++i)
      store_.params[i].second.value() = other.store_.params[i].second.value();
    backbone_.norm_mean = other.backbone_.norm_mean;
    backbone_.norm_std = other.backbone_.norm_std;
  }

 private:
  RunConfig cfg_;
  nn::ParamStore<T> store_;
  PyramidBackbone<T> backbone_;
  Sff<T> sff_;
  CrHeads<T> heads_;
  RefineHead<T> refine_;
};

// --------------------------------------------------------------- checkpoint

// Binary, little-endian, versioned:
//   magic "RFNCKPT\n", u32 format version, config echo string,
//   3+3 doubles of input normalization, u32 param count,
//   then per param: name, u32 ndims, dims..., doubles.
inline constexpr uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& in) {
  uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}
inline void write_doubles(std::ostream& out, const double* p, size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace ckpt_detail

template <typename T>
inline void save_checkpoint(const RfnModel<T>& model, const std::string& path) {
  using namespace ckpt_detail;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("RFNCKPT\n", 8);
  write_u32(out, kCheckpointVersion);
  write_string(out, serialize_config(model.config()));
  double norm[6];
  for (int i = 0; i < 3; ++i) {
    norm[i] = static_cast<double>(model.backbone().norm_mean[size_t(i)]);
    norm[i + 3] = static_cast<double>(model.backbone().norm_std[size_t(i)]);
  }
  write_doubles(out, norm, 6);
  write_u32(out, static_cast<uint32_t>(model.store().params.size()));
  for (const auto& [name, var] : model.store().params) {
    write_string(out, name);
    const auto& t = var.value();
    write_u32(out, static_cast<uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) write_u32(out, static_cast<uint32_t>(t.dim(d)));
    std::vector<double> buf(t.size());
    for (size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<double>(t[i]);
    write_doubles(out, buf.data(), buf.size());
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct CheckpointData {
  uint32_t version = 0;
  RunConfig config;
  std::array<double, 3> norm_mean{};
  std::array<double, 3> norm_std{};
  std::vector<std::pair<std::string, nn::Tensor<double>>> params;
};

inline CheckpointData load_checkpoint_data(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "RFNCKPT\n", 8) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
  CheckpointData data;
  data.version = read_u32(in);
  if (data.version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(data.version));
  data.config = parse_config_text(read_string(in));
  double norm[6];
  in.read(reinterpret_cast<char*>(norm), sizeof(norm));
  for (int i = 0; i < 3; ++i) {
    data.norm_mean[size_t(i)] = norm[i];
    data.norm_std[size_t(i)] = norm[i + 3];
  }
  uint32_t count = read_u32(in);
  for (uint32_t p = 0; p < count; ++p) {
    std::string name = read_string(in);
    uint32_t nd = read_u32(in);
    std::vector<int> dims;
    for (uint32_t d = 0; d < nd; ++d) dims.push_back(static_cast<int>(read_u32(in)));
    nn::Tensor<double> t(dims);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    data.params.emplace_back(std::move(name), std::move(t));
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return data;
}

template <typename T>
inline std::unique_ptr<RfnModel<T>> load_checkpoint(const std::string& path) {
  CheckpointData data = load_checkpoint_data(path);
  auto model = std::make_unique<RfnModel<T>>(data.config);
  for (int i = 0; i < 3; ++i) {
    model->backbone().norm_mean[size_t(i)] = static_cast<T>(data.norm_mean[size_t(i)]);
    model->backbone().norm_std[size_t(i)] = static_cast<T>(data.norm_std[size_t(i)]);
  }
  std::map<std::string, const nn::Tensor<double>*> by_name;
  for (const auto& [name, t] : data.params) by_name[name] = &t;
  for (auto& [name, var] : model->store().params) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: missing parameter '" + name + "'");
    if (it->second->dims() != var.value().dims())
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    for (size_t i = 0; i < var.value().size(); ++i)
      var.value()[i] = static_cast<T>((*it->second)[i]);
  }
  return model;
}

}  // namespace rfn
