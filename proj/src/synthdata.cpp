#include "ensforge/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "ensforge/errors.hpp"
#include "ensforge/rng.hpp"

namespace ensforge {

// --- geometry ---------------------------------------------------------------

bool GeomTransform::needs_square() const noexcept {
  switch (kind) {
    case GeomKind::rot90:
    case GeomKind::rot270:
    case GeomKind::transpose:
    case GeomKind::anti_transpose:
      return true;
    default:
      return false;
  }
}

GeomTransform GeomTransform::inverse() const noexcept {
  switch (kind) {
    case GeomKind::rot90: return of(GeomKind::rot270);
    case GeomKind::rot270: return of(GeomKind::rot90);
    case GeomKind::translate: return translate(-dx, -dy);
    default: return *this;
  }
}

std::string GeomTransform::name() const {
  switch (kind) {
    case GeomKind::identity: return "identity";
    case GeomKind::hflip: return "hflip";
    case GeomKind::vflip: return "vflip";
    case GeomKind::rot90: return "rot90";
    case GeomKind::rot180: return "rot180";
    case GeomKind::rot270: return "rot270";
    case GeomKind::transpose: return "transpose";
    case GeomKind::anti_transpose: return "anti_transpose";
    case GeomKind::translate: return "translate(" + std::to_string(dx) + "," + std::to_string(dy) + ")";
  }
  return "?";
}

GeomTransform parse_geom(const std::string& text) {
  for (const auto& g : square_symmetries()) {
    if (g.name() == text) return g;
  }
  static const std::regex tr(R"(translate\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\))");
  std::smatch m;
  if (std::regex_match(text, m, tr)) return GeomTransform::translate(std::stoi(m[1]), std::stoi(m[2]));
  throw ConfigError("unknown geometric transform '" + text + "'");
}

std::vector<GeomTransform> square_symmetries() {
  return {GeomTransform::of(GeomKind::identity), GeomTransform::of(GeomKind::hflip),
          GeomTransform::of(GeomKind::vflip),    GeomTransform::of(GeomKind::rot90),
          GeomTransform::of(GeomKind::rot180),   GeomTransform::of(GeomKind::rot270),
          GeomTransform::of(GeomKind::transpose), GeomTransform::of(GeomKind::anti_transpose)};
}

template <class T>
BasicTensor<T> apply_geom(const GeomTransform& t, const BasicTensor<T>& in) {
  if (!in.is_raster()) throw DimensionError("geometric transforms need a rank-2 raster");
  if (t.needs_square() && !in.is_square_raster()) {
    throw DimensionError(t.name() + " requires a square raster, got " + shape_string(in.dims()));
  }
  const long h = static_cast<long>(in.rows());
  const long w = static_cast<long>(in.cols());
  BasicTensor<T> out(in.dims());
  auto wrap = [](long v, long n) { return ((v % n) + n) % n; };
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      long sr = r, sc = c;
      switch (t.kind) {
        case GeomKind::identity: break;
        case GeomKind::hflip: sc = w - 1 - c; break;
        case GeomKind::vflip: sr = h - 1 - r; break;
        case GeomKind::rot90: sr = c; sc = w - 1 - r; break;
        case GeomKind::rot180: sr = h - 1 - r; sc = w - 1 - c; break;
        case GeomKind::rot270: sr = h - 1 - c; sc = r; break;
        case GeomKind::transpose: sr = c; sc = r; break;
        case GeomKind::anti_transpose: sr = h - 1 - c; sc = w - 1 - r; break;
        case GeomKind::translate: sr = wrap(r - t.dy, h); sc = wrap(c - t.dx, w); break;
      }
      out.at(r, c) = in.at(sr, sc);
    }
  }
  return out;
}

template Tensor apply_geom<float>(const GeomTransform&, const Tensor&);
template Tensor64 apply_geom<double>(const GeomTransform&, const Tensor64&);

// --- augmentation -----------------------------------------------------------

void AugConfig::validate() const {
  if (geom_pool.empty()) throw ConfigError("augmentation.geom_pool must not be empty");
  if (!(noise_sigma >= 0.0)) throw ConfigError("augmentation.noise_sigma must be >= 0");
  if (!(brightness_delta >= 0.0)) throw ConfigError("augmentation.brightness_delta must be >= 0");
}

bool AugConfig::is_noop() const {
  return noise_sigma == 0.0 && brightness_delta == 0.0 &&
         std::all_of(geom_pool.begin(), geom_pool.end(),
                     [](const GeomTransform& g) { return g.kind == GeomKind::identity; });
}

std::pair<Tensor, Tensor> augment_sample(const AugConfig& cfg, std::uint64_t index, const Tensor& image,
                                         const Tensor& mask) {
  cfg.validate();
  CounterRng rng(hash_words({cfg.seed, 0xa09u, index}));
  const GeomTransform& g = cfg.geom_pool[rng.below(cfg.geom_pool.size())];
  Tensor img = apply_geom(g, image);
  Tensor msk = apply_geom(g, mask);
  const double shift = cfg.brightness_delta > 0.0 ? rng.uniform(-cfg.brightness_delta, cfg.brightness_delta) : 0.0;
  if (cfg.noise_sigma > 0.0 || shift != 0.0) {
    for (auto& v : img.values()) {
      double x = static_cast<double>(v) + shift;
      if (cfg.noise_sigma > 0.0) x += cfg.noise_sigma * rng.normal();
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  return {std::move(img), std::move(msk)};
}

// --- scenes -----------------------------------------------------------------

void SceneSpec::validate() const {
  if (size < 16) throw ConfigError("scene.size must be >= 16");
  if (!(gsd > 0.0)) throw ConfigError("scene.gsd must be > 0");
  if (n_vehicles < 0 || n_distractors < 0) throw ConfigError("scene object counts must be >= 0");
  const auto& m = distractor_mix;
  if (m.tree < 0 || m.rock < 0 || m.building < 0 || std::abs(m.tree + m.rock + m.building - 1.0) > 1e-9) {
    throw ConfigError("scene.distractor_mix must be non-negative and sum to 1");
  }
  if (background.smoothing_radius < 0) throw ConfigError("scene.background.smoothing_radius must be >= 0");
  if (!(background.noise_scale >= 0.0)) throw ConfigError("scene.background.noise_scale must be >= 0");
  if (!(contrast_min >= 0.0 && contrast_min <= contrast_max)) {
    throw ConfigError("scene contrast range must satisfy 0 <= min <= max");
  }
}

std::uint64_t scene_seed(std::uint64_t master_seed, const std::string& split, std::size_t index) {
  return hash_words({derive_seed(master_seed, split), index});
}

namespace {

struct Offset {
  int dr, dc;
};

std::vector<Offset> vehicle_shape(CounterRng& rng) {
  const int len = rng.range(3, 6);
  const int wid = rng.range(2, 3);
  const int orient = rng.range(0, 3);
  std::vector<Offset> px;
  for (int a = 0; a < len; ++a) {
    for (int b = 0; b < wid; ++b) {
      switch (orient) {
        case 0: px.push_back({b, a}); break;       // horizontal
        case 1: px.push_back({a + b, a}); break;   // diagonal, down-right
        case 2: px.push_back({a, b}); break;       // vertical
        default: px.push_back({a + b, -a}); break; // diagonal, down-left
      }
    }
  }
  return px;
}

std::vector<Offset> disc_shape(CounterRng& rng, int diameter) {
  const double rad = diameter / 2.0;
  const double cx = (diameter - 1) / 2.0;
  std::vector<Offset> px;
  for (int r = 0; r < diameter; ++r) {
    for (int c = 0; c < diameter; ++c) {
      const double d2 = (r - cx) * (r - cx) + (c - cx) * (c - cx);
      const double jitter = 0.85 + 0.3 * rng.uniform();
      if (d2 <= rad * rad * jitter) px.push_back({r, c});
    }
  }
  if (px.empty()) px.push_back({0, 0});
  return px;
}

std::vector<Offset> rock_shape(CounterRng& rng) {
  const int steps = rng.range(2, 6);
  std::vector<Offset> px;
  int r = 0, c = 0;
  auto add_blob = [&](int cr, int cc) {
    for (int dr = 0; dr < 2; ++dr)
      for (int dc = 0; dc < 2; ++dc) px.push_back({cr + dr, cc + dc});
  };
  add_blob(r, c);
  for (int s = 0; s < steps; ++s) {
    r += rng.range(-1, 1);
    c += rng.range(-1, 1);
    add_blob(r, c);
  }
  std::sort(px.begin(), px.end(), [](Offset a, Offset b) { return a.dr != b.dr ? a.dr < b.dr : a.dc < b.dc; });
  px.erase(std::unique(px.begin(), px.end(), [](Offset a, Offset b) { return a.dr == b.dr && a.dc == b.dc; }),
           px.end());
  return px;
}

std::vector<Offset> rect_shape(int h, int w) {
  std::vector<Offset> px;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) px.push_back({r, c});
  return px;
}

class Placer {
 public:
  explicit Placer(int size) : size_(size), blocked_(static_cast<std::size_t>(size) * size, 0) {}

  // Finds an anchor where every shape pixel sits >= 2 px from the border and
  // no pixel lies within Chebyshev distance 2 of an existing object.
  bool place(CounterRng& rng, const std::vector<Offset>& shape, int& ar, int& ac) {
    int rmin = 0, rmax = 0, cmin = 0, cmax = 0;
    for (const auto& o : shape) {
      rmin = std::min(rmin, o.dr);
      rmax = std::max(rmax, o.dr);
      cmin = std::min(cmin, o.dc);
      cmax = std::max(cmax, o.dc);
    }
    const int lo_r = 2 - rmin, hi_r = size_ - 3 - rmax;
    const int lo_c = 2 - cmin, hi_c = size_ - 3 - cmax;
    if (lo_r > hi_r || lo_c > hi_c) return false;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int r = rng.range(lo_r, hi_r);
      const int c = rng.range(lo_c, hi_c);
      bool ok = true;
      for (const auto& o : shape) {
        if (blocked_[idx(r + o.dr, c + o.dc)]) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      for (const auto& o : shape) {
        for (int dr = -2; dr <= 2; ++dr) {
          for (int dc = -2; dc <= 2; ++dc) {
            const int rr = r + o.dr + dr, cc = c + o.dc + dc;
            if (rr >= 0 && rr < size_ && cc >= 0 && cc < size_) blocked_[idx(rr, cc)] = 1;
          }
        }
      }
      ar = r;
      ac = c;
      return true;
    }
    return false;
  }

 private:
  static constexpr int kMaxAttempts = 400;
  std::size_t idx(int r, int c) const { return static_cast<std::size_t>(r) * size_ + c; }
  int size_;
  std::vector<std::uint8_t> blocked_;
};

std::vector<double> smoothed_noise(const SceneSpec& spec, std::uint64_t seed) {
  const int n = spec.size;
  const int rad = spec.background.smoothing_radius;
  CounterRng rng(hash_words({seed, 0xb6u}));
  std::vector<double> white(static_cast<std::size_t>(n) * n);
  for (auto& v : white) v = rng.normal();
  // Separable box filter with edge clamping.
  auto box = [&](const std::vector<double>& src, bool horizontal) {
    std::vector<double> dst(src.size());
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        double s = 0.0;
        for (int k = -rad; k <= rad; ++k) {
          const int rr = horizontal ? r : std::clamp(r + k, 0, n - 1);
          const int cc = horizontal ? std::clamp(c + k, 0, n - 1) : c;
          s += src[static_cast<std::size_t>(rr) * n + cc];
        }
        dst[static_cast<std::size_t>(r) * n + c] = s / (2 * rad + 1);
      }
    }
    return dst;
  };
  std::vector<double> smooth = box(box(white, true), false);
  // Rescale to unit std (box averaging shrinks it by the window size), then
  // add a faint per-pixel grain.
  const double gain = static_cast<double>(2 * rad + 1);
  std::vector<double> out(smooth.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gain * smooth[i] + 0.3 * rng.normal();
  return out;
}

}  // namespace

Scene gen_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const int n = spec.size;
  const std::size_t npx = static_cast<std::size_t>(n) * n;

  std::vector<double> img = smoothed_noise(spec, seed);
  for (auto& v : img) v = spec.background.base_intensity + spec.background.noise_scale * v;

  Scene scene;
  scene.spec = spec;
  scene.seed = seed;
  scene.mask = Tensor::raster(n, n, 0.0f);

  CounterRng rng(hash_words({seed, 0x91ac3u}));
  Placer placer(n);
  auto contrast = [&] { return rng.uniform(spec.contrast_min, spec.contrast_max); };
  auto paint = [&](const std::vector<Offset>& shape, int ar, int ac, double offset) {
    for (const auto& o : shape) img[static_cast<std::size_t>(ar + o.dr) * n + ac + o.dc] += offset;
  };

  int vehicles = 0;
  for (int v = 0; v < spec.n_vehicles; ++v) {
    const auto shape = vehicle_shape(rng);
    const double offset = (rng.uniform() < 0.5 ? -1.0 : 1.0) * contrast();
    int ar = 0, ac = 0;
    if (!placer.place(rng, shape, ar, ac)) {
      throw PlacementError("could not place vehicle " + std::to_string(v + 1) + " of " +
                               std::to_string(spec.n_vehicles) + " (placed " + std::to_string(vehicles) +
                               " vehicles, 0 distractors)",
                           vehicles, 0);
    }
    paint(shape, ar, ac, offset);
    double sr = 0.0, sc = 0.0;
    for (const auto& o : shape) {
      scene.mask.at(ar + o.dr, ac + o.dc) = 1.0f;
      sr += ar + o.dr;
      sc += ac + o.dc;
    }
    scene.gt_points.push_back({sr / shape.size(), sc / shape.size()});
    ++vehicles;
  }

  int distractors = 0;
  const auto& mix = spec.distractor_mix;
  for (int d = 0; d < spec.n_distractors; ++d) {
    const double u = rng.uniform();
    std::vector<Offset> shape;
    double offset = 0.0;
    if (u < mix.tree) {
      shape = disc_shape(rng, rng.range(3, 7));
      offset = -contrast();
    } else if (u < mix.tree + mix.rock) {
      shape = rock_shape(rng);
      offset = (rng.uniform() < 0.5 ? -1.0 : 1.0) * contrast();
    } else {
      shape = rect_shape(rng.range(8, 16), rng.range(8, 16));
      offset = contrast();
    }
    int ar = 0, ac = 0;
    if (!placer.place(rng, shape, ar, ac)) {
      throw PlacementError("could not place distractor " + std::to_string(d + 1) + " of " +
                               std::to_string(spec.n_distractors) + " (placed " + std::to_string(vehicles) +
                               " vehicles, " + std::to_string(distractors) + " distractors)",
                           vehicles, distractors);
    }
    paint(shape, ar, ac, offset);
    ++distractors;
  }

  scene.image = Tensor::raster(n, n);
  for (std::size_t i = 0; i < npx; ++i) scene.image[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  return scene;
}

}  // namespace ensforge
