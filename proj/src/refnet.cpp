#include "ensforge/refnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "ensforge/rng.hpp"

namespace ensforge {

void NetConfig::validate() const {
  if (depth < 1 || depth > 6) throw ConfigError("net.depth must be in [1, 6], got " + std::to_string(depth));
  if (base_channels < 1) throw ConfigError("net.base_channels must be >= 1");
  if (input_size < 2) throw ConfigError("net.input_size must be >= 2");
  if (input_size % (1 << depth) != 0) {
    throw ConfigError("net.input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " +
                      std::to_string(1 << depth));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("net.dropout_rate must be in [0, 1), got " + std::to_string(dropout_rate));
  }
}

double dropout_scale(double rate, std::uint64_t seed, int stage, int channel) noexcept {
  if (rate <= 0.0) return 1.0;
  const double u = uniform_at(hash_words({seed, 0xd50u, static_cast<std::uint64_t>(stage)}),
                              static_cast<std::uint64_t>(channel));
  return u < rate ? 0.0 : 1.0 / (1.0 - rate);
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
struct Feature {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  Feature() = default;
  Feature(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, T(0)) {}
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
};

struct ConvLayer {
  std::size_t weight;  // index into the ParamSet
  std::size_t bias;
  int cin;
  int cout;
  int k;  // 3 or 1
};

struct Topology {
  int depth;
  std::vector<ConvLayer> layers;
  // layer ids
  int enc(int d, int i) const { return 2 * d + i; }
  int mid(int i) const { return 2 * depth + i; }
  int dec(int d, int i) const { return 2 * depth + 2 + 2 * (depth - 1 - d) + i; }
  int head() const { return 4 * depth + 2; }
};

Topology make_topology(const NetConfig& cfg) {
  Topology t;
  t.depth = cfg.depth;
  const int b = cfg.base_channels;
  std::size_t idx = 0;
  auto push = [&](int cin, int cout, int k) {
    t.layers.push_back({idx, idx + 1, cin, cout, k});
    idx += 2;
  };
  for (int d = 0; d < cfg.depth; ++d) {
    const int cin = d == 0 ? 1 : b << (d - 1);
    const int cout = b << d;
    push(cin, cout, 3);
    push(cout, cout, 3);
  }
  push(b << (cfg.depth - 1), b << cfg.depth, 3);
  push(b << cfg.depth, b << cfg.depth, 3);
  for (int d = cfg.depth - 1; d >= 0; --d) {
    const int cout = b << d;
    push((b << (d + 1)) + cout, cout, 3);
    push(cout, cout, 3);
  }
  push(b, 1, 1);
  return t;
}

std::vector<std::string> layer_names(int depth) {
  std::vector<std::string> names;
  for (int d = 0; d < depth; ++d) {
    names.push_back("enc" + std::to_string(d) + ".conv1");
    names.push_back("enc" + std::to_string(d) + ".conv2");
  }
  names.push_back("mid.conv1");
  names.push_back("mid.conv2");
  for (int d = depth - 1; d >= 0; --d) {
    names.push_back("dec" + std::to_string(d) + ".conv1");
    names.push_back("dec" + std::to_string(d) + ".conv2");
  }
  names.push_back("head");
  return names;
}

template <class T>
void im2col3(const Feature<T>& in, std::vector<T>& col) {
  const int h = in.h, w = in.w;
  const std::size_t plane = in.plane();
  col.assign(static_cast<std::size_t>(in.c) * 9 * plane, T(0));
  for (int ci = 0; ci < in.c; ++ci) {
    const T* src_plane = in.v.data() + ci * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.data() + ((ci * 3 + ky) * 3 + kx) * plane;
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* src = src_plane + static_cast<std::size_t>(sy) * w + dx;
          T* drow = dst + static_cast<std::size_t>(y) * w;
          for (int x = x0; x < x1; ++x) drow[x] = src[x];
        }
      }
    }
  }
}

template <class T>
void col2im3_add(const std::vector<T>& col, Feature<T>& grad_in) {
  const int h = grad_in.h, w = grad_in.w;
  const std::size_t plane = grad_in.plane();
  for (int ci = 0; ci < grad_in.c; ++ci) {
    T* dst_plane = grad_in.v.data() + ci * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col.data() + ((ci * 3 + ky) * 3 + kx) * plane;
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          T* drow = dst_plane + static_cast<std::size_t>(sy) * w + dx;
          const T* srow = src + static_cast<std::size_t>(y) * w;
          for (int x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

template <class T>
Feature<T> conv_forward(const BasicParamSet<T>& params, const ConvLayer& L, const Feature<T>& in, bool relu) {
  const auto& W = params.tensor(L.weight).values();
  const auto& bias = params.tensor(L.bias).values();
  const int K = L.cin * L.k * L.k;
  const auto N = static_cast<Eigen::Index>(in.plane());

  thread_local std::vector<T> colbuf;  // reused: these buffers are megabytes per call
  const T* colp = in.v.data();
  if (L.k == 3) {
    im2col3(in, colbuf);
    colp = colbuf.data();
  }
  Feature<T> out(L.cout, in.h, in.w);
  MatMap<T> O(out.v.data(), L.cout, N);
  ConstMatMap<T> Wm(W.data(), L.cout, K);
  ConstMatMap<T> C(colp, K, N);
  O.noalias() = Wm * C;
  for (int co = 0; co < L.cout; ++co) {
    T* row = out.v.data() + co * out.plane();
    const T b = bias[co];
    if (relu) {
      for (Eigen::Index i = 0; i < N; ++i) row[i] = std::max(row[i] + b, T(0));
    } else {
      for (Eigen::Index i = 0; i < N; ++i) row[i] += b;
    }
  }
  return out;
}

// dOut must already include the activation derivative.
template <class T>
Feature<T> conv_backward(const BasicParamSet<T>& params, const ConvLayer& L, const Feature<T>& in,
                         const Feature<T>& dOut, BasicParamSet<T>& grads, bool need_input_grad) {
  const auto& W = params.tensor(L.weight).values();
  auto& dW = grads.tensor(L.weight).values();
  auto& db = grads.tensor(L.bias).values();
  const int K = L.cin * L.k * L.k;
  const auto N = static_cast<Eigen::Index>(in.plane());

  thread_local std::vector<T> colbuf;
  const T* colp = in.v.data();
  if (L.k == 3) {
    im2col3(in, colbuf);
    colp = colbuf.data();
  }
  ConstMatMap<T> C(colp, K, N);
  ConstMatMap<T> dO(dOut.v.data(), L.cout, N);
  MatMap<T> dWm(dW.data(), L.cout, K);
  dWm.noalias() += dO * C.transpose();
  for (int co = 0; co < L.cout; ++co) {
    const T* row = dOut.v.data() + co * dOut.plane();
    T s = T(0);
    for (Eigen::Index i = 0; i < N; ++i) s += row[i];
    db[co] += s;
  }
  if (!need_input_grad) return {};

  ConstMatMap<T> Wm(W.data(), L.cout, K);
  Feature<T> dIn(L.cin, in.h, in.w);
  if (L.k == 1) {
    MatMap<T> dI(dIn.v.data(), K, N);
    dI.noalias() = Wm.transpose() * dO;
  } else {
    thread_local std::vector<T> dcol;
    dcol.resize(static_cast<std::size_t>(K) * N);
    MatMap<T> dC(dcol.data(), K, N);
    dC.noalias() = Wm.transpose() * dO;
    col2im3_add(dcol, dIn);
  }
  return dIn;
}

template <class T>
void relu_mask(Feature<T>& grad, const Feature<T>& activated) {
  for (std::size_t i = 0; i < grad.v.size(); ++i) {
    if (!(activated.v[i] > T(0))) grad.v[i] = T(0);
  }
}

template <class T>
Feature<T> maxpool2(const Feature<T>& in, std::vector<std::int32_t>& argmax) {
  Feature<T> out(in.c, in.h / 2, in.w / 2);
  argmax.assign(out.v.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < in.c; ++c) {
    const std::size_t base = c * in.plane();
    for (int y = 0; y < out.h; ++y) {
      for (int x = 0; x < out.w; ++x, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * in.w + 2 * x;
        const std::size_t cand[3] = {best + 1, best + in.w, best + in.w + 1};
        for (std::size_t k : cand) {
          if (in.v[k] > in.v[best]) best = k;
        }
        out.v[o] = in.v[best];
        argmax[o] = static_cast<std::int32_t>(best);
      }
    }
  }
  return out;
}

template <class T>
Feature<T> upsample2(const Feature<T>& in) {
  Feature<T> out(in.c, in.h * 2, in.w * 2);
  for (int c = 0; c < in.c; ++c) {
    const T* src = in.v.data() + c * in.plane();
    T* dst = out.v.data() + c * out.plane();
    for (int y = 0; y < out.h; ++y) {
      const T* srow = src + static_cast<std::size_t>(y / 2) * in.w;
      T* drow = dst + static_cast<std::size_t>(y) * out.w;
      for (int x = 0; x < out.w; ++x) drow[x] = srow[x / 2];
    }
  }
  return out;
}

template <class T>
Feature<T> upsample2_backward(const Feature<T>& grad, int channels) {
  Feature<T> out(channels, grad.h / 2, grad.w / 2);
  for (int c = 0; c < channels; ++c) {
    const T* src = grad.v.data() + c * grad.plane();
    T* dst = out.v.data() + c * out.plane();
    for (int y = 0; y < grad.h; ++y) {
      const T* srow = src + static_cast<std::size_t>(y) * grad.w;
      T* drow = dst + static_cast<std::size_t>(y / 2) * out.w;
      for (int x = 0; x < grad.w; ++x) drow[x / 2] += srow[x];
    }
  }
  return out;
}

template <class T>
Feature<T> concat(const Feature<T>& a, const Feature<T>& b) {
  Feature<T> out;
  out.c = a.c + b.c;
  out.h = a.h;
  out.w = a.w;
  out.v.reserve(a.v.size() + b.v.size());
  out.v.insert(out.v.end(), a.v.begin(), a.v.end());
  out.v.insert(out.v.end(), b.v.begin(), b.v.end());
  return out;
}

// Per-image zero mean / unit variance. Raw scenes sit around 0.55 with small
// contrast, which plain He-initialised ReLU stacks fail to learn from.
template <class T>
void standardize(std::vector<T>& v) {
  double sum = 0.0;
  for (const T x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (const T x : v) ss += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(ss / static_cast<double>(v.size())), kInputStdFloor);
  for (auto& x : v) x = static_cast<T>((x - mean) / sd);
}

template <class T>
struct Trace {
  std::vector<Feature<T>> conv_in;
  std::vector<Feature<T>> conv_out;       // post-activation (pre-dropout for enc conv2)
  std::vector<std::vector<T>> drop_scale;  // per encoder stage; empty when no dropout applied
  std::vector<std::vector<std::int32_t>> pool_idx;
  std::vector<int> pooled_from_c, pooled_from_h, pooled_from_w;
  Feature<T> logits;
};

template <class T>
void run_forward(const Topology& topo, const NetConfig& cfg, const BasicParamSet<T>& params,
                 const BasicTensor<T>& image, PredictMode mode, Trace<T>& tr) {
  const int D = topo.depth;
  const std::size_t nl = topo.layers.size();
  tr.conv_in.assign(nl, {});
  tr.conv_out.assign(nl, {});
  tr.drop_scale.assign(D, {});
  tr.pool_idx.assign(D, {});
  tr.pooled_from_c.assign(D, 0);
  tr.pooled_from_h.assign(D, 0);
  tr.pooled_from_w.assign(D, 0);

  auto conv = [&](int id, Feature<T> in, bool relu) -> const Feature<T>& {
    tr.conv_in[id] = std::move(in);
    tr.conv_out[id] = conv_forward(params, topo.layers[id], tr.conv_in[id], relu);
    return tr.conv_out[id];
  };

  Feature<T> x(1, static_cast<int>(image.rows()), static_cast<int>(image.cols()));
  x.v = image.values();
  standardize(x.v);
  std::vector<Feature<T>> skips(D);
  const bool drop = mode.is_stochastic() && cfg.dropout_rate > 0.0;

  for (int d = 0; d < D; ++d) {
    conv(topo.enc(d, 0), std::move(x), true);
    Feature<T> b = conv(topo.enc(d, 1), tr.conv_out[topo.enc(d, 0)], true);
    if (drop) {
      auto& scales = tr.drop_scale[d];
      scales.resize(b.c);
      for (int ch = 0; ch < b.c; ++ch) {
        scales[ch] = static_cast<T>(dropout_scale(cfg.dropout_rate, mode.dropout_seed, d, ch));
        T* p = b.v.data() + ch * b.plane();
        for (std::size_t i = 0; i < b.plane(); ++i) p[i] *= scales[ch];
      }
    }
    tr.pooled_from_c[d] = b.c;
    tr.pooled_from_h[d] = b.h;
    tr.pooled_from_w[d] = b.w;
    x = maxpool2(b, tr.pool_idx[d]);
    skips[d] = std::move(b);
  }
  conv(topo.mid(0), std::move(x), true);
  x = conv(topo.mid(1), tr.conv_out[topo.mid(0)], true);
  for (int d = D - 1; d >= 0; --d) {
    Feature<T> cat = concat(upsample2(x), skips[d]);
    conv(topo.dec(d, 0), std::move(cat), true);
    x = conv(topo.dec(d, 1), tr.conv_out[topo.dec(d, 0)], true);
  }
  tr.conv_in[topo.head()] = std::move(x);
  tr.logits = conv_forward(params, topo.layers[topo.head()], tr.conv_in[topo.head()], false);
}

template <class T>
void run_backward(const Topology& topo, const BasicParamSet<T>& params, Trace<T>& tr, Feature<T> dlogits,
                  BasicParamSet<T>& grads) {
  const int D = topo.depth;
  Feature<T> dx = conv_backward(params, topo.layers[topo.head()], tr.conv_in[topo.head()], dlogits, grads, true);

  std::vector<Feature<T>> dskip(D);
  for (int d = 0; d < D; ++d) {
    relu_mask(dx, tr.conv_out[topo.dec(d, 1)]);
    dx = conv_backward(params, topo.layers[topo.dec(d, 1)], tr.conv_in[topo.dec(d, 1)], dx, grads, true);
    relu_mask(dx, tr.conv_out[topo.dec(d, 0)]);
    Feature<T> dcat =
        conv_backward(params, topo.layers[topo.dec(d, 0)], tr.conv_in[topo.dec(d, 0)], dx, grads, true);
    const int c_up = topo.layers[topo.mid(1)].cout >> (D - 1 - d);
    Feature<T> dup;
    dup.c = c_up;
    dup.h = dcat.h;
    dup.w = dcat.w;
    const std::size_t split = static_cast<std::size_t>(c_up) * dcat.plane();
    dup.v.assign(dcat.v.begin(), dcat.v.begin() + static_cast<std::ptrdiff_t>(split));
    dskip[d].c = dcat.c - c_up;
    dskip[d].h = dcat.h;
    dskip[d].w = dcat.w;
    dskip[d].v.assign(dcat.v.begin() + static_cast<std::ptrdiff_t>(split), dcat.v.end());
    dx = upsample2_backward(dup, c_up);
  }
  relu_mask(dx, tr.conv_out[topo.mid(1)]);
  dx = conv_backward(params, topo.layers[topo.mid(1)], tr.conv_in[topo.mid(1)], dx, grads, true);
  relu_mask(dx, tr.conv_out[topo.mid(0)]);
  dx = conv_backward(params, topo.layers[topo.mid(0)], tr.conv_in[topo.mid(0)], dx, grads, true);

  for (int d = D - 1; d >= 0; --d) {
    Feature<T> db = std::move(dskip[d]);
    const auto& idx = tr.pool_idx[d];
    for (std::size_t o = 0; o < idx.size(); ++o) db.v[idx[o]] += dx.v[o];
    if (!tr.drop_scale[d].empty()) {
      for (int ch = 0; ch < db.c; ++ch) {
        T* p = db.v.data() + ch * db.plane();
        for (std::size_t i = 0; i < db.plane(); ++i) p[i] *= tr.drop_scale[d][ch];
      }
    }
    relu_mask(db, tr.conv_out[topo.enc(d, 1)]);
    Feature<T> da = conv_backward(params, topo.layers[topo.enc(d, 1)], tr.conv_in[topo.enc(d, 1)], db, grads, true);
    relu_mask(da, tr.conv_out[topo.enc(d, 0)]);
    dx = conv_backward(params, topo.layers[topo.enc(d, 0)], tr.conv_in[topo.enc(d, 0)], da, grads, d > 0);
  }
}

// Numerically stable BCE on a logit.
inline double bce_from_logit(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

template <class T>
void check_image(const NetConfig& cfg, const BasicTensor<T>& image, const char* what) {
  if (!image.is_raster() || image.rows() != static_cast<std::size_t>(cfg.input_size) ||
      image.cols() != static_cast<std::size_t>(cfg.input_size)) {
    throw DimensionError(std::string(what) + " must be " + std::to_string(cfg.input_size) + "x" +
                         std::to_string(cfg.input_size) + ", got " + shape_string(image.dims()));
  }
}

template <class T>
void check_mask(const BasicTensor<T>& image, const BasicTensor<T>& mask) {
  if (!mask.same_shape(image)) {
    throw DimensionError("mask shape " + shape_string(mask.dims()) + " differs from image " +
                         shape_string(image.dims()));
  }
  for (const T v : mask.values()) {
    if (v != T(0) && v != T(1)) throw ValidationError("mask values must be exactly 0 or 1");
  }
}

}  // namespace

RefNet::RefNet(NetConfig config) : config_(config) {
  config_.validate();
  const Topology topo = make_topology(config_);
  const auto names = layer_names(config_.depth);
  for (std::size_t i = 0; i < topo.layers.size(); ++i) {
    const auto& L = topo.layers[i];
    layout_.emplace_back(names[i] + ".weight",
                         std::vector<std::size_t>{static_cast<std::size_t>(L.cout), static_cast<std::size_t>(L.cin),
                                                  static_cast<std::size_t>(L.k), static_cast<std::size_t>(L.k)});
    layout_.emplace_back(names[i] + ".bias", std::vector<std::size_t>{static_cast<std::size_t>(L.cout)});
  }
  fingerprint_ = shape_fingerprint(layout_);
}

template <class T>
void RefNet::check_params(const BasicParamSet<T>& params) const {
  if (params.fingerprint() != fingerprint_) {
    throw CombinabilityError("parameter set fingerprint " + fingerprint_hex(params.fingerprint()) +
                             " does not match network architecture " + fingerprint_hex(fingerprint_));
  }
}

template <class T>
BasicParamSet<T> RefNet::init_params() const {
  BasicParamSet<T> out;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& [name, dims] = layout_[i];
    BasicTensor<T> t(dims);
    // The 1x1 head starts at zero so every pixel begins at p = 0.5; a random
    // head on top of the ReLU stack starts with large logits and stalls.
    if (dims.size() == 4 && name != "head.weight") {
      const double fan_in = static_cast<double>(dims[1] * dims[2] * dims[3]);
      const double bound = std::sqrt(6.0 / fan_in);
      CounterRng rng(hash_words({config_.init_seed, 0x1417u, i}));
      for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    out.add(name, std::move(t));
  }
  return out;
}

template <class T>
BasicTensor<T> RefNet::logits(const BasicParamSet<T>& params, const BasicTensor<T>& image, PredictMode mode) const {
  check_params(params);
  check_image(config_, image, "input image");
  const Topology topo = make_topology(config_);
  Trace<T> tr;
  run_forward(topo, config_, params, image, mode, tr);
  return BasicTensor<T>(image.dims(), std::move(tr.logits.v));
}

template <class T>
BasicTensor<T> RefNet::forward(const BasicParamSet<T>& params, const BasicTensor<T>& image, PredictMode mode) const {
  BasicTensor<T> out = logits(params, image, mode);
  for (auto& v : out.values()) {
    v = static_cast<T>(std::clamp(sigmoid(static_cast<double>(v)), kProbFloor, 1.0 - kProbFloor));
  }
  return out;
}

template <class T>
LossAndGrad<T> RefNet::loss_and_grad(const BasicParamSet<T>& params, std::span<const BasicTensor<T>> images,
                                     std::span<const BasicTensor<T>> masks,
                                     std::span<const PredictMode> modes) const {
  check_params(params);
  if (images.empty() || images.size() != masks.size()) {
    throw DimensionError("loss_and_grad needs a non-empty batch with one mask per image");
  }
  if (!modes.empty() && modes.size() != images.size()) {
    throw DimensionError("loss_and_grad: modes must be empty or one per image");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    check_image(config_, images[i], "training image");
    check_mask(images[i], masks[i]);
  }
  const Topology topo = make_topology(config_);
  const double n_total = static_cast<double>(images.size()) * images[0].size();

  LossAndGrad<T> out;
  out.grads = params.zeros_like();
  double loss_sum = 0.0;
  Trace<T> tr;
  for (std::size_t s = 0; s < images.size(); ++s) {
    const PredictMode mode = modes.empty() ? PredictMode::deterministic() : modes[s];
    run_forward(topo, config_, params, images[s], mode, tr);
    Feature<T> dlog(1, tr.logits.h, tr.logits.w);
    const auto& y = masks[s].values();
    for (std::size_t i = 0; i < dlog.v.size(); ++i) {
      const double z = static_cast<double>(tr.logits.v[i]);
      const double yi = static_cast<double>(y[i]);
      loss_sum += bce_from_logit(z, yi);
      dlog.v[i] = static_cast<T>((sigmoid(z) - yi) / n_total);
    }
    run_backward(topo, params, tr, std::move(dlog), out.grads);
  }
  out.loss = loss_sum / n_total;
  return out;
}

template <class T>
double RefNet::loss(const BasicParamSet<T>& params, std::span<const BasicTensor<T>> images,
                    std::span<const BasicTensor<T>> masks, std::span<const PredictMode> modes) const {
  if (images.empty() || images.size() != masks.size()) {
    throw DimensionError("loss needs a non-empty batch with one mask per image");
  }
  double sum = 0.0;
  double n = 0.0;
  for (std::size_t s = 0; s < images.size(); ++s) {
    check_mask(images[s], masks[s]);
    const PredictMode mode = modes.empty() ? PredictMode::deterministic() : modes[s];
    const BasicTensor<T> z = logits(params, images[s], mode);
    for (std::size_t i = 0; i < z.size(); ++i) {
      sum += bce_from_logit(static_cast<double>(z[i]), static_cast<double>(masks[s][i]));
    }
    n += static_cast<double>(z.size());
  }
  return sum / n;
}

template <class T>
void sgd_step(BasicParamSet<T>& params, const BasicParamSet<T>& grads, BasicParamSet<T>& velocity, double lr,
              double momentum) {
  require_combinable(params, grads, "sgd_step(grads)");
  require_combinable(params, velocity, "sgd_step(velocity)");
  const T lr_t = static_cast<T>(lr);
  const T mu = static_cast<T>(momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.tensor(i).values();
    auto& v = velocity.tensor(i).values();
    const auto& g = grads.tensor(i).values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + g[j];
      p[j] = p[j] - lr_t * v[j];
    }
  }
}

#define ENSFORGE_INSTANTIATE(T)                                                                                  \
  template BasicParamSet<T> RefNet::init_params<T>() const;                                                      \
  template BasicTensor<T> RefNet::forward<T>(const BasicParamSet<T>&, const BasicTensor<T>&, PredictMode) const; \
  template BasicTensor<T> RefNet::logits<T>(const BasicParamSet<T>&, const BasicTensor<T>&, PredictMode) const;  \
  template LossAndGrad<T> RefNet::loss_and_grad<T>(const BasicParamSet<T>&, std::span<const BasicTensor<T>>,     \
                                                   std::span<const BasicTensor<T>>, std::span<const PredictMode>) \
      const;                                                                                                     \
  template double RefNet::loss<T>(const BasicParamSet<T>&, std::span<const BasicTensor<T>>,                      \
                                  std::span<const BasicTensor<T>>, std::span<const PredictMode>) const;          \
  template void RefNet::check_params<T>(const BasicParamSet<T>&) const;                                          \
  template void sgd_step<T>(BasicParamSet<T>&, const BasicParamSet<T>&, BasicParamSet<T>&, double, double);

ENSFORGE_INSTANTIATE(float)
ENSFORGE_INSTANTIATE(double)

#undef ENSFORGE_INSTANTIATE

}  // namespace ensforge
