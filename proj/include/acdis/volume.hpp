#ifndef ACDIS_VOLUME_HPP_
#define ACDIS_VOLUME_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "acdis/common.hpp"
#include "acdis/tensor.hpp"

namespace acdis {

inline constexpr int kNumModalities = 4;
inline constexpr int kNumClasses = 4;  // 0 bg, 1 NCR/NET, 2 ED, 3 ET

extern const std::array<const char*, kNumModalities> kModalityNames;
extern const std::array<const char*, kNumModalities> kModalityDisplay;

// Dense 3-D grid, depth-major (index = (z*h + y)*w + x).
template <typename T>
struct Grid3 {
  std::int64_t d = 0, h = 0, w = 0;
  std::vector<T> data;

  Grid3() = default;
  Grid3(std::int64_t d_, std::int64_t h_, std::int64_t w_)
      : d(d_), h(h_), w(w_),
        data(static_cast<size_t>(d_ * h_ * w_), T{}) {}

  std::int64_t size() const { return d * h * w; }
  T& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<size_t>((z * h + y) * w + x)];
  }
  T at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<size_t>((z * h + y) * w + x)];
  }
  bool same_dims(const Grid3& o) const {
    return d == o.d && h == o.h && w == o.w;
  }
};

using FloatGrid = Grid3<float>;
using LabelGrid = Grid3<std::uint8_t>;

// 4-bit availability vector, ordered (FLAIR, T1ce, T1, T2).
struct ModalityMask {
  std::array<bool, kNumModalities> available{true, true, true, true};

  static ModalityMask all_available();
  int count() const;
  bool any() const;
  bool operator==(const ModalityMask& o) const {
    return available == o.available;
  }
  // e.g. "1001" for FLAIR+T2; used in logs and file names.
  std::string bits() const;
  // Table-style glyph string over {●,○}.
  std::string glyphs() const;
};

// The 15 non-empty modality subsets: singletons, pairs, triples, full set,
// each group in lexicographic modality order.
std::vector<ModalityMask> enumerate_masks();

struct MultiModalVolume {
  std::array<FloatGrid, kNumModalities> modalities;
  LabelGrid label;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};

  std::int64_t dim_d() const { return label.d; }
  std::int64_t dim_h() const { return label.h; }
  std::int64_t dim_w() const { return label.w; }
  void validate() const;
};

struct IntensityProfile {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  bool invert = false;
  // Raw intensity for labels 1 (NCR/NET), 2 (ED), 3 (ET) before the
  // monotone map is applied.
  std::array<double, 3> class_levels{0.6, 0.8, 0.7};
};

std::array<IntensityProfile, kNumModalities> default_intensity_profiles();

struct PhantomSpec {
  std::int64_t size = 16;
  int num_lesions = 1;
  std::uint64_t seed = 0;
  std::array<IntensityProfile, kNumModalities> intensity_profiles =
      default_intensity_profiles();

  void validate() const;
};

// Axis-aligned ellipsoid (voxel coordinates, semi-axes in voxels).
struct Ellipsoid {
  double cz, cy, cx;
  double az, ay, ax;
  bool contains(double z, double y, double x) const {
    const double dz = (z - cz) / az;
    const double dy = (y - cy) / ay;
    const double dx = (x - cx) / ax;
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

// Concentric triple: outer shell ED, middle shell NCR/NET, core ET.
struct LesionGeometry {
  Ellipsoid outer, middle, inner;
};

// Deterministic lesion sampling; generate_phantom uses exactly this
// geometry, so tests can voxel-count it independently.
std::vector<LesionGeometry> sample_lesions(const PhantomSpec& spec);

MultiModalVolume generate_phantom(const PhantomSpec& spec);

// Random crop with one shared offset across modalities and label.
MultiModalVolume preprocess_crop(const MultiModalVolume& v, std::int64_t crop,
                                 Rng& rng);

struct AugmentConfig {
  double flip_prob = 0.5;
  double rot90_prob = 0.5;
  double intensity_scale = 0.1;  // scale drawn from [1-s, 1+s]
  double intensity_shift = 0.05; // shift drawn from [-b, b]
};

MultiModalVolume augment(const MultiModalVolume& v, const AugmentConfig& cfg,
                         Rng& rng);

// Geometry primitives (shared between augment and its tests).
template <typename T>
Grid3<T> flip_axis(const Grid3<T>& g, int axis);
template <typename T>
Grid3<T> rotate90(const Grid3<T>& g, int axis, int quarter_turns);

MultiModalVolume apply_modality_mask(const MultiModalVolume& v,
                                     const ModalityMask& m);

// Case directory I/O: meta.json + <modality>.bin (f32 LE) + label.bin (u8).
void save_volume(const MultiModalVolume& v, const std::string& case_dir);
MultiModalVolume load_volume(const std::string& case_dir);

// Min-max normalization over nonzero voxels, per modality.
void normalize_modalities(MultiModalVolume& v);

// ---- tensor bridge (training/evaluation) ----
Tensor modalities_to_tensor(const MultiModalVolume& v);  // (4,D,H,W)
Tensor label_to_tensor(const MultiModalVolume& v);       // (D,H,W)

// ---- dataset ----
struct Dataset {
  std::vector<std::string> case_ids;
  std::vector<MultiModalVolume> cases;
  size_t size() const { return cases.size(); }
};

void write_dataset_index(const std::string& dir,
                         const std::vector<std::string>& case_ids,
                         const std::string& origin_note);
Dataset load_dataset(const std::string& dir);

}  // namespace acdis

#endif  // ACDIS_VOLUME_HPP_
