#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ensforge/tensor.hpp"

namespace ensforge {

// ---------------------------------------------------------------------------
// Geometric transforms: exact index permutations of a raster.
// ---------------------------------------------------------------------------

enum class GeomKind { identity, hflip, vflip, rot90, rot180, rot270, transpose, anti_transpose, translate };

struct GeomTransform {
  GeomKind kind = GeomKind::identity;
  int dx = 0;  // translate only: +dx moves content right
  int dy = 0;  // translate only: +dy moves content down

  static GeomTransform identity() { return {}; }
  static GeomTransform of(GeomKind k) { return {k, 0, 0}; }
  static GeomTransform translate(int dx, int dy) { return {GeomKind::translate, dx, dy}; }

  bool invertible() const noexcept { return true; }
  bool needs_square() const noexcept;
  GeomTransform inverse() const noexcept;
  std::string name() const;

  friend bool operator==(const GeomTransform&, const GeomTransform&) = default;
};

/// Parses "identity", "hflip", ..., "translate(dx,dy)".
GeomTransform parse_geom(const std::string& text);

/// The 8 symmetries of the square.
std::vector<GeomTransform> square_symmetries();

/// Rotations and transposes require a square raster (DimensionError otherwise).
/// Translations wrap around the raster edges so the map stays a permutation.
template <class T>
BasicTensor<T> apply_geom(const GeomTransform& t, const BasicTensor<T>& raster);

template <class T>
BasicTensor<T> invert_geom(const GeomTransform& t, const BasicTensor<T>& raster) {
  return apply_geom(t.inverse(), raster);
}

// ---------------------------------------------------------------------------
// Photometric + geometric training augmentation.
// ---------------------------------------------------------------------------

struct AugConfig {
  std::vector<GeomTransform> geom_pool{GeomTransform::identity()};
  double noise_sigma = 0.0;
  double brightness_delta = 0.0;  // brightness offset drawn from [-delta, +delta]
  std::uint64_t seed = 0;

  void validate() const;
  bool is_noop() const;
  friend bool operator==(const AugConfig&, const AugConfig&) = default;
};

/// Draws one geometry from the pool (applied to image and mask alike), then
/// adds noise and a brightness shift to the image only, clamped to [0,1].
/// Deterministic per (cfg.seed, index).
std::pair<Tensor, Tensor> augment_sample(const AugConfig& cfg, std::uint64_t index, const Tensor& image,
                                         const Tensor& mask);

// ---------------------------------------------------------------------------
// Synthetic desert scenes.
// ---------------------------------------------------------------------------

struct PixelPoint {
  double row = 0.0;
  double col = 0.0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct DistractorMix {
  double tree = 0.5;
  double rock = 0.3;
  double building = 0.2;
  friend bool operator==(const DistractorMix&, const DistractorMix&) = default;
};

struct BackgroundSpec {
  double noise_scale = 0.06;
  int smoothing_radius = 2;
  double base_intensity = 0.55;
  friend bool operator==(const BackgroundSpec&, const BackgroundSpec&) = default;
};

struct SceneSpec {
  int size = 128;
  double gsd = 0.5;  // metres per pixel
  int n_vehicles = 10;
  int n_distractors = 14;
  DistractorMix distractor_mix;
  BackgroundSpec background;
  double contrast_min = 0.12;  // |vehicle - background| offset range
  double contrast_max = 0.28;

  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Scene {
  Tensor image;  // HxW in [0,1]
  Tensor mask;   // HxW in {0,1}; vehicle pixels only
  std::vector<PixelPoint> gt_points;
  SceneSpec spec;
  std::uint64_t seed = 0;
};

/// Throws PlacementError (with achieved counts) when objects cannot be placed
/// with the required 2 px clearance after bounded retries.
Scene gen_scene(const SceneSpec& spec, std::uint64_t seed);

/// Per-scene seed for scene `index` of a split derived from a master seed.
std::uint64_t scene_seed(std::uint64_t master_seed, const std::string& split, std::size_t index);

}  // namespace ensforge
