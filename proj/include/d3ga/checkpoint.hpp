#pragma once

// D3GC checkpoints: "D3GC", u32 version, u32 block count, then named typed
// blocks (u32-length name, u8 dtype, u32 rank, u64 dims, raw little-endian
// payload). Holds everything needed to render, resume, or re-initialize:
// parameters, Adam moments, step, cages, template, config and skeleton.

#include "d3ga/binary_io.hpp"
#include "d3ga/cage.hpp"
#include "d3ga/config.hpp"
#include "d3ga/model.hpp"
#include "d3ga/optim.hpp"
#include "d3ga/synthetic.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace d3ga {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
  case DType::f32: return 4;
  case DType::f64: return 8;
  case DType::i32: return 4;
  case DType::u8: return 1;
  }
  throw FormatError("unknown dtype");
}

struct Block {
  DType dtype = DType::u8;
  std::vector<std::uint64_t> shape;
  std::vector<unsigned char> bytes;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
};

/// Ordered name → block map; writing iterates names in lexicographic order.
class BlockFile {
public:
  std::map<std::string, Block> blocks;

  bool has(const std::string& name) const { return blocks.count(name) > 0; }

  const Block& at(const std::string& name) const {
    const auto it = blocks.find(name);
    if (it == blocks.end()) throw FormatError("checkpoint block missing: " + name);
    return it->second;
  }

  void put_f64(const std::string& name, const double* data, std::vector<std::uint64_t> shape) {
    Block b{DType::f64, std::move(shape), {}};
    b.bytes.resize(b.count() * 8);
    for (std::size_t i = 0; i < b.count(); ++i) {
      const double v = bin::to_little(data[i]);
      std::memcpy(b.bytes.data() + i * 8, &v, 8);
    }
    blocks[name] = std::move(b);
  }
  void put_mat(const std::string& name, const MatX& m) {
    put_f64(name, m.data(), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
  }
  void put_i32(const std::string& name, const std::vector<std::int32_t>& v) {
    Block b{DType::i32, {v.size()}, {}};
    b.bytes.resize(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::int32_t x = bin::to_little(v[i]);
      std::memcpy(b.bytes.data() + i * 4, &x, 4);
    }
    blocks[name] = std::move(b);
  }
  void put_u8(const std::string& name, const std::string& s) {
    Block b{DType::u8, {s.size()}, std::vector<unsigned char>(s.begin(), s.end())};
    blocks[name] = std::move(b);
  }
  void put_json(const std::string& name, const nlohmann::json& j) { put_u8(name, j.dump()); }

  std::vector<double> get_f64(const std::string& name) const {
    const Block& b = at(name);
    std::vector<double> out(b.count());
    if (b.dtype == DType::f64) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        double v;
        std::memcpy(&v, b.bytes.data() + i * 8, 8);
        out[i] = bin::to_little(v);
      }
    } else if (b.dtype == DType::f32) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        float v;
        std::memcpy(&v, b.bytes.data() + i * 4, 4);
        out[i] = bin::to_little(v);
      }
    } else {
      throw FormatError("block " + name + " is not floating point");
    }
    return out;
  }
  MatX get_mat(const std::string& name) const {
    const Block& b = at(name);
    if (b.shape.size() != 2) throw FormatError("block " + name + " is not a matrix");
    const auto v = get_f64(name);
    MatX m(static_cast<Eigen::Index>(b.shape[0]), static_cast<Eigen::Index>(b.shape[1]));
    std::copy(v.begin(), v.end(), m.data());
    return m;
  }
  void get_into(const std::string& name, double* dst, std::size_t n) const {
    const auto v = get_f64(name);
    if (v.size() != n) throw FormatError("block " + name + " has the wrong size");
    std::copy(v.begin(), v.end(), dst);
  }
  std::vector<std::int32_t> get_i32(const std::string& name) const {
    const Block& b = at(name);
    if (b.dtype != DType::i32) throw FormatError("block " + name + " is not i32");
    std::vector<std::int32_t> out(b.count());
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::int32_t v;
      std::memcpy(&v, b.bytes.data() + i * 4, 4);
      out[i] = bin::to_little(v);
    }
    return out;
  }
  std::string get_u8(const std::string& name) const {
    const Block& b = at(name);
    if (b.dtype != DType::u8) throw FormatError("block " + name + " is not u8");
    return {b.bytes.begin(), b.bytes.end()};
  }
  nlohmann::json get_json(const std::string& name) const {
    try {
      return nlohmann::json::parse(get_u8(name));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("block " + name + ": " + e.what());
    }
  }

  void write(std::ostream& out) const {
    out.write("D3GC", 4);
    bin::put<std::uint32_t>(out, kCheckpointFormatVersion);
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, b] : blocks) {
      bin::put_string(out, name);
      bin::put<std::uint8_t>(out, static_cast<std::uint8_t>(b.dtype));
      bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
      for (auto s : b.shape) bin::put<std::uint64_t>(out, s);
      bin::put_bytes(out, b.bytes.data(), b.bytes.size());
    }
  }

  static BlockFile read(std::istream& in) {
    bin::expect_magic(in, "D3GC");
    const auto version = bin::get<std::uint32_t>(in);
    if (version != kCheckpointFormatVersion)
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    BlockFile f;
    const auto n = bin::get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string name = bin::get_string(in, 4096);
      Block b;
      const auto dt = bin::get<std::uint8_t>(in);
      if (dt > 3) throw FormatError("unknown dtype in block " + name);
      b.dtype = static_cast<DType>(dt);
      const auto rank = bin::get<std::uint32_t>(in);
      if (rank > 8) throw FormatError("block rank out of range: " + name);
      for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(bin::get<std::uint64_t>(in));
      const std::size_t bytes = b.count() * dtype_size(b.dtype);
      if (bytes > (std::size_t{1} << 36)) throw FormatError("block too large: " + name);
      b.bytes.resize(bytes);
      bin::get_bytes(in, b.bytes.data(), bytes);
      f.blocks[name] = std::move(b);
    }
    return f;
  }
};

/// Everything a training run carries between steps.
struct TrainState {
  TrainConfig config;
  Avatar avatar;
  Adam adam;
  int step = 0;
  std::map<Part, TetCage> cages;  // as built (before single-layer merging)
  std::vector<Camera> cameras;
  std::vector<Pose> poses;  // training poses, for rendering by frame index
  int embedding_failures = 0;
};

inline std::string cage_bytes(const TetCage& c) {
  std::ostringstream s(std::ios::binary);
  write_cage(s, c);
  return s.str();
}

inline TetCage cage_from_bytes(const std::string& b) {
  std::istringstream s(b, std::ios::binary);
  return read_cage(s);
}

inline BlockFile checkpoint_blocks(TrainState& st) {
  BlockFile f;
  Avatar& a = st.avatar;
  f.put_json("config", config_to_json(st.config));
  f.put_json("skeleton", skeleton_to_json(a.skeleton));
  f.put_json("cameras", cameras_to_json(st.cameras));
  {
    nlohmann::json poses = nlohmann::json::array();
    for (const auto& p : st.poses) poses.push_back(pose_to_json(p));
    f.put_json("poses", poses);
  }
  {
    const TriMesh& m = a.template_mesh;
    MatX pos(3, static_cast<Eigen::Index>(m.vertex_count()));
    for (std::size_t i = 0; i < m.vertex_count(); ++i) pos.col(static_cast<Eigen::Index>(i)) = m.positions[i];
    f.put_mat("template.positions", pos);
    std::vector<std::int32_t> faces, parts;
    for (std::size_t i = 0; i < m.face_count(); ++i) {
      for (int k : m.faces[i]) faces.push_back(k);
      parts.push_back(static_cast<std::int32_t>(m.face_part(i)));
    }
    f.put_i32("template.faces", faces);
    f.put_i32("template.face_parts", parts);
    f.put_json("template.weights", skin_weights_to_json(a.template_weights));
  }
  for (const auto& [p, c] : st.cages) f.put_u8("cage." + std::string(part_name(p)), cage_bytes(c));
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& p : a.parts) layout.push_back({{"part", part_name(p.part)}, {"begin", p.begin}, {"end", p.end}});
  f.put_json("layout", layout);
  f.put_json("meta", {{"step", st.step},
                      {"adam_t", st.adam.t},
                      {"gaussians", a.gaussian_count()},
                      {"frames", a.frames.frames()},
                      {"embedding_failures", st.embedding_failures}});
  f.put_i32("gauss.tet", std::vector<std::int32_t>(a.tet.begin(), a.tet.end()));
  std::vector<std::int32_t> labels;
  for (Part p : a.label) labels.push_back(static_cast<std::int32_t>(p));
  f.put_i32("gauss.label", labels);
  if (!a.skin.empty()) f.put_json("gauss.skin", skin_weights_to_json(a.skin));
  const ParamList params = a.params();
  st.adam.bind(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    std::vector<std::uint64_t> shape(p.shape.begin(), p.shape.end());
    f.put_f64("param." + p.name, p.data, shape);
    f.put_f64("adam.m." + p.name, st.adam.m[i].data(), shape);
    f.put_f64("adam.v." + p.name, st.adam.v[i].data(), shape);
  }
  return f;
}

/// Writes atomically (temp file + rename).
inline void save_checkpoint(const std::string& path, TrainState& st) {
  const BlockFile f = checkpoint_blocks(st);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointWriteFailure("cannot open " + tmp);
    f.write(out);
    out.flush();
    if (!out) throw CheckpointWriteFailure("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointWriteFailure("cannot move checkpoint into place: " + ec.message());
}

inline std::vector<Part> layout_parts(const nlohmann::json& layout) {
  std::vector<Part> out;
  for (const auto& e : layout) out.push_back(part_from_name(e.at("part").get<std::string>()));
  return out;
}

/// Rebuilds the avatar shapes from the stored config, then overwrites every
/// tensor with the stored values.
inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const BlockFile f = BlockFile::read(in);
  TrainState st;
  try {
    st.config = config_from_json(f.get_json("config"));
    Avatar& a = st.avatar;
    a.opts = st.config.model;
    a.skeleton = skeleton_from_json(f.get_json("skeleton"));
    st.cameras = cameras_from_json(f.get_json("cameras"));
    for (const auto& p : f.get_json("poses")) st.poses.push_back(pose_from_json(p));
    {
      const MatX pos = f.get_mat("template.positions");
      for (Eigen::Index i = 0; i < pos.cols(); ++i) a.template_mesh.positions.push_back(pos.col(i));
      const auto faces = f.get_i32("template.faces");
      const auto parts = f.get_i32("template.face_parts");
      if (faces.size() != parts.size() * 3) throw FormatError("template face arrays disagree");
      for (std::size_t i = 0; i < parts.size(); ++i) {
        a.template_mesh.faces.push_back({faces[i * 3], faces[i * 3 + 1], faces[i * 3 + 2]});
        a.template_mesh.face_parts.push_back(static_cast<Part>(parts[i]));
      }
      a.template_weights = skin_weights_from_json(f.get_json("template.weights"));
    }
    for (const auto& [name, b] : f.blocks)
      if (name.rfind("cage.", 0) == 0) {
        TetCage c = cage_from_bytes(f.get_u8(name));
        st.cages[part_from_name(name.substr(5))] = std::move(c);
      }
    const auto meta = f.get_json("meta");
    st.step = meta.at("step").get<int>();
    st.adam = Adam(AdamConfig{st.config.lr, 0.9, 0.999, 1e-8, st.config.group_lr});
    st.adam.t = meta.at("adam_t").get<int>();
    st.embedding_failures = meta.value("embedding_failures", 0);
    const int n = meta.at("gaussians").get<int>();
    const int frames = meta.at("frames").get<int>();
    const auto layout = f.get_json("layout");
    for (const auto& e : layout) {
      AvatarPart ap;
      ap.part = part_from_name(e.at("part").get<std::string>());
      ap.begin = e.at("begin").get<int>();
      ap.end = e.at("end").get<int>();
      if (!a.opts.no_cage) {
        const auto it = st.cages.find(ap.part);
        if (it == st.cages.end()) throw FormatError("missing cage for layer " + std::string(part_name(ap.part)));
        ap.cage = it->second;
      }
      a.parts.push_back(std::move(ap));
    }
    const auto tets = f.get_i32("gauss.tet");
    const auto labels = f.get_i32("gauss.label");
    if (static_cast<int>(tets.size()) != n || static_cast<int>(labels.size()) != n)
      throw FormatError("per-Gaussian arrays disagree with the Gaussian count");
    a.tet.assign(tets.begin(), tets.end());
    for (auto l : labels) a.label.push_back(static_cast<Part>(l));
    if (f.has("gauss.skin")) a.skin = skin_weights_from_json(f.get_json("gauss.skin"));
    a.bary = MatX::Zero(4, n);
    a.mean = MatX::Zero(3, n);
    a.rot = MatX::Zero(4, n);
    a.log_scale = MatX::Zero(3, n);
    a.opacity_logit = MatX::Zero(1, n);
    a.features = MatX::Zero(kColorFeatureDim, n);
    a.frames = FrameEmbedding(a.opts.frame_embedding_dim, frames);
    std::mt19937_64 rng(0);
    a.build_networks(rng);
    a.zero_grad_buffers();
    // Tensors not trained in this mode still round-trip through the canonical mean.
    if (f.has("param.gauss.mean")) f.get_into("param.gauss.mean", a.mean.data(), static_cast<std::size_t>(a.mean.size()));
    if (f.has("param.gauss.barycentric"))
      f.get_into("param.gauss.barycentric", a.bary.data(), static_cast<std::size_t>(a.bary.size()));
    const ParamList params = a.params();
    st.adam.bind(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      f.get_into("param." + p.name, p.data, p.size);
      f.get_into("adam.m." + p.name, st.adam.m[i].data(), p.size);
      f.get_into("adam.v." + p.name, st.adam.v[i].data(), p.size);
    }
    if (!a.opts.no_cage)
      for (int i = 0; i < n; ++i) a.mean.col(i) = a.canonical_mean(i);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  return st;
}

inline bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::equal(std::istreambuf_iterator<char>(fa), std::istreambuf_iterator<char>(),
                    std::istreambuf_iterator<char>(fb), std::istreambuf_iterator<char>());
}

} // namespace d3ga
