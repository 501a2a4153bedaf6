#pragma once

// Conditioning networks: a batched ReLU MLP with an explicit backward pass,
// input encodings (NeRF positional, real SH view basis), auto-decoded tables
// and the output heads of the cage-offset, Gaussian-correction and shading nets.

#include "d3ga/common.hpp"
#include "d3ga/params.hpp"

#include <numbers>
#include <random>
#include <vector>

namespace d3ga {

// ---------------------------------------------------------------------------
// MLP

/// Fully connected net, ReLU on hidden layers, linear output. Activations are
/// column-major (features × batch).
///
/// The first layer optionally splits its input into a `shared` vector, used by
/// every batch column (the pose), and a per-column part. This avoids repeating
/// the pose columns of the first GEMM for every Gaussian.
class Mlp {
public:
  struct Cache {
    std::vector<MatX> inputs;  // input to each layer (post-activation of the previous)
    VecX shared;
    MatX output;
  };

  Mlp() = default;

  /// widths = {in_shared + in_columns, hidden..., out}.
  Mlp(int shared_in, int column_in, std::vector<int> hidden, int out)
      : shared_in_(shared_in), column_in_(column_in) {
    std::vector<int> w{shared_in + column_in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      weights_.push_back(MatX::Zero(w[l + 1], w[l]));
      biases_.push_back(MatX::Zero(w[l + 1], 1));
    }
    grad_weights_ = weights_;
    grad_biases_ = biases_;
  }

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  void init_kaiming(std::mt19937_64& rng, bool zero_final) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(weights_[l].cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < weights_[l].size(); ++i) weights_[l].data()[i] = u(rng);
      biases_[l].setZero();
    }
    if (zero_final) weights_.back().setZero();
  }

  void zero_output_layer() {
    weights_.back().setZero();
    biases_.back().setZero();
  }

  int shared_in() const { return shared_in_; }
  int column_in() const { return column_in_; }
  int out_dim() const { return static_cast<int>(weights_.back().rows()); }
  std::size_t layer_count() const { return weights_.size(); }
  std::vector<int> widths() const {
    std::vector<int> w{static_cast<int>(weights_.front().cols())};
    for (const auto& m : weights_) w.push_back(static_cast<int>(m.rows()));
    return w;
  }

  /// Σ (in + 1) · out over layers.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>((weights_[l].cols() + 1) * weights_[l].rows());
    return n;
  }

  MatX forward(const VecX& shared, const MatX& x, Cache* cache = nullptr) const {
    if (shared.size() != shared_in_ || x.rows() != column_in_)
      throw DimensionMismatch("mlp input " + std::to_string(shared.size()) + "+" +
                              std::to_string(x.rows()) + ", expected " + std::to_string(shared_in_) +
                              "+" + std::to_string(column_in_));
    const Eigen::Index n = x.cols();
    if (cache) {
      cache->inputs.clear();
      cache->shared = shared;
      cache->inputs.push_back(x);
    }
    const MatX& w0 = weights_[0];
    VecX bias0 = biases_[0].col(0);
    if (shared_in_ > 0) bias0 += w0.leftCols(shared_in_) * shared;
    MatX h = w0.rightCols(column_in_) * x;
    h.colwise() += bias0;
    for (std::size_t l = 1; l < weights_.size(); ++l) {
      h = h.cwiseMax(0.0);
      if (cache) cache->inputs.push_back(h);
      MatX z = weights_[l] * h;
      z.colwise() += biases_[l].col(0);
      h = std::move(z);
    }
    (void)n;
    if (cache) cache->output = h;
    return h;
  }

  /// Accumulates parameter gradients; returns dL/dx for the column inputs
  /// when `want_input_grad` (otherwise an empty matrix).
  MatX backward(const Cache& cache, const MatX& grad_out, bool want_input_grad, VecX* grad_shared = nullptr) {
    MatX g = grad_out;
    for (std::size_t l = weights_.size(); l-- > 1;) {
      const MatX& in = cache.inputs[l];
      grad_weights_[l].noalias() += g * in.transpose();
      grad_biases_[l].col(0) += g.rowwise().sum();
      MatX gin = weights_[l].transpose() * g;
      g = gin.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
    }
    const MatX& x = cache.inputs[0];
    const VecX gsum = g.rowwise().sum();
    grad_biases_[0].col(0) += gsum;
    if (shared_in_ > 0) grad_weights_[0].leftCols(shared_in_).noalias() += gsum * cache.shared.transpose();
    grad_weights_[0].rightCols(column_in_).noalias() += g * x.transpose();
    if (grad_shared && shared_in_ > 0) *grad_shared = weights_[0].leftCols(shared_in_).transpose() * gsum;
    if (!want_input_grad) return {};
    return weights_[0].rightCols(column_in_).transpose() * g;
  }

  void collect(ParamList& out, const std::string& prefix, const std::string& group = "mlp") {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(make_param(prefix + ".w" + std::to_string(l), weights_[l], grad_weights_[l], group));
      out.push_back(make_param(prefix + ".b" + std::to_string(l), biases_[l], grad_biases_[l], group));
    }
  }

  std::vector<MatX>& weights() { return weights_; }
  std::vector<MatX>& biases() { return biases_; }
  const std::vector<MatX>& weights() const { return weights_; }
  const std::vector<MatX>& biases() const { return biases_; }

private:
  int shared_in_ = 0;
  int column_in_ = 0;
  std::vector<MatX> weights_, biases_;
  std::vector<MatX> grad_weights_, grad_biases_;
};

inline constexpr int kHiddenWidth = 128;
inline std::vector<int> default_hidden() { return {kHiddenWidth, kHiddenWidth, kHiddenWidth}; }

// ---------------------------------------------------------------------------
// Encodings

/// [p (optional)] then for each octave k: sin(2^k π p), cos(2^k π p).
inline int positional_encoding_dim(int octaves, bool passthrough) { return 6 * octaves + (passthrough ? 3 : 0); }

inline VecX positional_encoding(const Vec3& p, int octaves, bool passthrough = true) {
  VecX e(positional_encoding_dim(octaves, passthrough));
  int o = 0;
  if (passthrough) {
    e.segment<3>(0) = p;
    o = 3;
  }
  for (int k = 0; k < octaves; ++k) {
    const double f = std::ldexp(std::numbers::pi, k);
    for (int a = 0; a < 3; ++a) e[o + a] = std::sin(f * p[a]);
    for (int a = 0; a < 3; ++a) e[o + 3 + a] = std::cos(f * p[a]);
    o += 6;
  }
  return e;
}

namespace sh {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2{1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                          -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> C3{-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                          0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                          -0.5900435899266435};
} // namespace sh

using Vec16 = Eigen::Matrix<double, 16, 1>;
using Vec48 = Eigen::Matrix<double, 48, 1>;

/// Real SH basis, bands 0..3, index l² + l + m. No unit-length check; the
/// polynomial is evaluated as given.
inline Vec16 sh_basis_unchecked(const Vec3& d) {
  using namespace sh;
  const double x = d.x(), y = d.y(), z = d.z();
  const double xx = x * x, yy = y * y, zz = z * z;
  Vec16 r;
  r[0] = C0;
  r[1] = -C1 * y;
  r[2] = C1 * z;
  r[3] = -C1 * x;
  r[4] = C2[0] * x * y;
  r[5] = C2[1] * y * z;
  r[6] = C2[2] * (2.0 * zz - xx - yy);
  r[7] = C2[3] * x * z;
  r[8] = C2[4] * (xx - yy);
  r[9] = C3[0] * y * (3.0 * xx - yy);
  r[10] = C3[1] * x * y * z;
  r[11] = C3[2] * y * (4.0 * zz - xx - yy);
  r[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
  r[13] = C3[4] * x * (4.0 * zz - xx - yy);
  r[14] = C3[5] * z * (xx - yy);
  r[15] = C3[6] * x * (xx - 3.0 * yy);
  return r;
}

inline Vec16 sh_basis(const Vec3& direction) {
  if (std::abs(direction.norm() - 1.0) > 1e-6)
    throw NonUnitDirection("|d| = " + std::to_string(direction.norm()));
  return sh_basis_unchecked(direction);
}

/// Pulls dL/dY back onto the direction.
inline Vec3 sh_basis_backward(const Vec3& d, const Vec16& g) {
  using namespace sh;
  const double x = d.x(), y = d.y(), z = d.z();
  const double xx = x * x, yy = y * y, zz = z * z;
  Vec3 o = Vec3::Zero();
  o += g[1] * Vec3(0, -C1, 0);
  o += g[2] * Vec3(0, 0, C1);
  o += g[3] * Vec3(-C1, 0, 0);
  o += g[4] * C2[0] * Vec3(y, x, 0);
  o += g[5] * C2[1] * Vec3(0, z, y);
  o += g[6] * C2[2] * Vec3(-2.0 * x, -2.0 * y, 4.0 * z);
  o += g[7] * C2[3] * Vec3(z, 0, x);
  o += g[8] * C2[4] * Vec3(2.0 * x, -2.0 * y, 0);
  o += g[9] * C3[0] * Vec3(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0);
  o += g[10] * C3[1] * Vec3(y * z, x * z, x * y);
  o += g[11] * C3[2] * Vec3(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
  o += g[12] * C3[3] * Vec3(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
  o += g[13] * C3[4] * Vec3(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
  o += g[14] * C3[5] * Vec3(2.0 * x * z, -2.0 * y * z, xx - yy);
  o += g[15] * C3[6] * Vec3(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0);
  return o;
}

/// View-dependent color from 16 SH coefficients per channel (channel-major),
/// squashed by a sigmoid. Used by the "w/ SH" configuration.
inline Vec3 sh_color_eval(const Vec48& coeffs, const Vec3& direction) {
  const Vec16 y = sh_basis_unchecked(direction);
  Vec3 c;
  for (int ch = 0; ch < 3; ++ch) c[ch] = sigmoid(coeffs.segment<16>(16 * ch).dot(y));
  return c;
}

struct ShColorGrad {
  Vec48 coeffs;
  Vec3 direction;
};

inline ShColorGrad sh_color_eval_backward(const Vec48& coeffs, const Vec3& direction, const Vec3& grad) {
  const Vec16 y = sh_basis_unchecked(direction);
  ShColorGrad g;
  Vec16 gy = Vec16::Zero();
  for (int ch = 0; ch < 3; ++ch) {
    const double s = sigmoid(coeffs.segment<16>(16 * ch).dot(y));
    const double graw = grad[ch] * s * (1.0 - s);
    g.coeffs.segment<16>(16 * ch) = graw * y;
    gy += graw * coeffs.segment<16>(16 * ch);
  }
  g.direction = sh_basis_backward(direction, gy);
  return g;
}

// ---------------------------------------------------------------------------
// Auto-decoded tables

/// One learned vector per training frame; unseen frames use the table mean.
struct FrameEmbedding {
  MatX table;  // dim × frames
  MatX grad;

  FrameEmbedding() = default;
  FrameEmbedding(int dim, int frames) : table(MatX::Zero(dim, frames)), grad(MatX::Zero(dim, frames)) {}

  int dim() const { return static_cast<int>(table.rows()); }
  int frames() const { return static_cast<int>(table.cols()); }

  VecX mean() const { return table.cols() > 0 ? VecX(table.rowwise().mean()) : VecX::Zero(table.rows()); }

  /// Embedding for a training frame, or the mean for frame < 0 / out of range.
  VecX lookup(int frame) const {
    if (frame >= 0 && frame < frames()) return table.col(frame);
    return mean();
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back(make_param(prefix, table, grad, "frame_embedding"));
  }
};

inline constexpr int kColorFeatureDim = 48;

// ---------------------------------------------------------------------------
// Output heads. Each maps the raw MLP output to bounded corrections.

struct HeadScales {
  double cage_offset = 0.05;  // Ψ: scene units
  double barycentric = 0.05;  // Π: Δb
  double log_scale = 0.5;     // Π: Δs
  double rotation = 0.2;      // Π: per quaternion component
  double mean_offset = 0.05;  // Π in LBS-only mode: Δμ
};

/// Δv = s · tanh(raw).
inline MatX psi_head(const MatX& raw, double scale) { return scale * raw.array().tanh().matrix(); }

inline MatX psi_head_backward(const MatX& raw, double scale, const MatX& grad) {
  const auto t = raw.array().tanh();
  return (grad.array() * scale * (1.0 - t * t)).matrix();
}

struct PiDeltas {
  MatX barycentric;  // 4 × N, columns sum to zero (or Δμ 3 × N in LBS-only mode)
  MatX log_scale;    // 3 × N
  MatX rotation;     // 4 × N
};

/// Rows: [Δb(4) | Δs(3) | Δq(4)] or, with `mean_mode`, [Δμ(3) | Δs(3) | Δq(4)].
/// Δb is projected onto sum zero so b + Δb stays an affine combination.
inline PiDeltas pi_head(const MatX& raw, const HeadScales& s, bool mean_mode = false) {
  PiDeltas d;
  const int nb = mean_mode ? 3 : 4;
  const MatX t = raw.array().tanh().matrix();
  if (mean_mode) {
    d.barycentric = s.mean_offset * t.topRows(3);
  } else {
    d.barycentric = s.barycentric * t.topRows(4);
    d.barycentric.rowwise() -= d.barycentric.colwise().mean();
  }
  d.log_scale = s.log_scale * t.middleRows(nb, 3);
  d.rotation = s.rotation * t.middleRows(nb + 3, 4);
  return d;
}

inline MatX pi_head_backward(const MatX& raw, const HeadScales& s, const PiDeltas& grad, bool mean_mode = false) {
  const int nb = mean_mode ? 3 : 4;
  const MatX t = raw.array().tanh().matrix();
  const MatX dt = (1.0 - t.array() * t.array()).matrix();
  MatX g(raw.rows(), raw.cols());
  if (mean_mode) {
    g.topRows(3) = (grad.barycentric.array() * s.mean_offset * dt.topRows(3).array()).matrix();
  } else {
    MatX gb = grad.barycentric;
    gb.rowwise() -= gb.colwise().mean();
    g.topRows(4) = (gb.array() * s.barycentric * dt.topRows(4).array()).matrix();
  }
  g.middleRows(nb, 3) = (grad.log_scale.array() * s.log_scale * dt.middleRows(nb, 3).array()).matrix();
  g.middleRows(nb + 3, 4) = (grad.rotation.array() * s.rotation * dt.middleRows(nb + 3, 4).array()).matrix();
  return g;
}

struct GammaOut {
  MatX color;    // 3 × N in [0,1]
  VecX opacity;  // N in [0,1]
};

/// color = σ(raw₀..₂), opacity = σ(raw₃ + bias) where bias is the Gaussian's
/// opacity logit (zero when absent).
inline GammaOut gamma_head(const MatX& raw, const VecX* opacity_bias = nullptr) {
  GammaOut o;
  o.color = (1.0 / (1.0 + (-raw.topRows(3).array()).exp())).matrix();
  VecX z = raw.row(3).transpose();
  if (opacity_bias) z += *opacity_bias;
  o.opacity = (1.0 / (1.0 + (-z.array()).exp())).matrix();
  return o;
}

/// Returns dL/draw; dL/dbias equals the last row.
inline MatX gamma_head_backward(const GammaOut& out, const MatX& grad_color, const VecX& grad_opacity) {
  MatX g(4, out.color.cols());
  g.topRows(3) = (grad_color.array() * out.color.array() * (1.0 - out.color.array())).matrix();
  g.row(3) = (grad_opacity.array() * out.opacity.array() * (1.0 - out.opacity.array())).matrix().transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Single-sample conveniences mirroring the three networks' signatures.

/// Ψ input columns for a set of canonical nodes.
inline MatX psi_inputs(const std::vector<Vec3>& nodes, int octaves) {
  MatX x(positional_encoding_dim(octaves, true), static_cast<Eigen::Index>(nodes.size()));
  for (std::size_t i = 0; i < nodes.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = positional_encoding(nodes[i], octaves, true);
  return x;
}

inline MatX psi_forward(const Mlp& psi, const VecX& pose, const std::vector<Vec3>& nodes, int octaves,
                        double max_offset = 0.05) {
  return psi_head(psi.forward(pose, psi_inputs(nodes, octaves)), max_offset);
}

inline VecX pi_input(const Vec4& b, const Vec4& q, const Vec3& log_s) {
  VecX x(11);
  x << b, q, log_s;
  return x;
}

inline PiDeltas pi_forward(const Mlp& pi, const VecX& pose, const Vec4& b, const Vec4& q, const Vec3& log_s,
                           const HeadScales& s = {}) {
  return pi_head(pi.forward(pose, pi_input(b, q, log_s)), s);
}

inline VecX gamma_input(const Vec16& view_enc, const Vec48& h, const VecX& frame_emb) {
  VecX x(16 + 48 + frame_emb.size());
  x << view_enc, h, frame_emb;
  return x;
}

inline GammaOut gamma_forward(const Mlp& gamma, const VecX& pose, const Vec16& view_enc, const Vec48& h,
                              const VecX& frame_emb) {
  return gamma_head(gamma.forward(pose, gamma_input(view_enc, h, frame_emb)));
}

} // namespace d3ga
