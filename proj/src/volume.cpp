#include "acdis/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace acdis {

const std::array<const char*, kNumModalities> kModalityNames = {
    "flair", "t1ce", "t1", "t2"};
const std::array<const char*, kNumModalities> kModalityDisplay = {
    "FLAIR", "T1ce", "T1", "T2"};

static_assert(std::endian::native == std::endian::little,
              "volume payload I/O assumes a little-endian host");

ModalityMask ModalityMask::all_available() { return ModalityMask{}; }

int ModalityMask::count() const {
  int n = 0;
  for (bool b : available) n += b ? 1 : 0;
  return n;
}

bool ModalityMask::any() const { return count() > 0; }

std::string ModalityMask::bits() const {
  std::string s;
  for (bool b : available) s += b ? '1' : '0';
  return s;
}

std::string ModalityMask::glyphs() const {
  std::string s;
  for (bool b : available) s += b ? "●" : "○";
  return s;
}

std::vector<ModalityMask> enumerate_masks() {
  std::vector<ModalityMask> out;
  for (int size = 1; size <= kNumModalities; ++size) {
    // Lexicographic combinations in modality order.
    std::array<bool, kNumModalities> pick{};
    std::fill(pick.begin(), pick.begin() + size, true);
    std::vector<std::array<bool, kNumModalities>> combos;
    // std::prev_permutation over the descending-sorted pick array walks
    // combinations in lexicographic order of selected indices.
    do {
      combos.push_back(pick);
    } while (std::prev_permutation(pick.begin(), pick.end()));
    for (const auto& c : combos) {
      ModalityMask m;
      m.available = c;
      out.push_back(m);
    }
  }
  return out;
}

void MultiModalVolume::validate() const {
  for (int m = 0; m < kNumModalities; ++m) {
    if (modalities[m].d != label.d || modalities[m].h != label.h ||
        modalities[m].w != label.w) {
      throw ShapeError(std::string("volume: modality '") + kModalityNames[m] +
                       "' dims differ from label");
    }
    for (float f : modalities[m].data) {
      if (!std::isfinite(f)) {
        throw ValueError(std::string("volume: non-finite intensity in '") +
                         kModalityNames[m] + "'");
      }
    }
  }
  for (std::uint8_t v : label.data) {
    if (v >= kNumClasses) throw ValueError("volume: label value out of range");
  }
}

std::array<IntensityProfile, kNumModalities> default_intensity_profiles() {
  std::array<IntensityProfile, kNumModalities> p;
  // FLAIR: edema very bright.
  p[0] = {1.0, 0.0, 1.0, false, {0.75, 0.92, 0.82}};
  // T1ce: enhancing core bright, necrosis dark.
  p[1] = {1.0, 0.02, 0.9, false, {0.18, 0.55, 0.95}};
  // T1: inverted contrast relative to the others.
  p[2] = {0.95, 0.0, 1.0, true, {0.42, 0.60, 0.50}};
  // T2: edema bright with a mild gamma.
  p[3] = {1.0, 0.0, 1.2, false, {0.65, 0.88, 0.72}};
  return p;
}

void PhantomSpec::validate() const {
  if (size < 8) throw ConfigError("phantom: size must be >= 8");
  if (num_lesions < 0) throw ConfigError("phantom: num_lesions must be >= 0");
}

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct BackgroundField {
  struct Bump {
    double cz, cy, cx, sigma, amp;
  };
  std::vector<Bump> bumps;
  double base = 0.45;
  Ellipsoid brain;

  double value(double z, double y, double x) const {
    if (!brain.contains(z, y, x)) return 0.0;
    double v = base;
    for (const auto& b : bumps) {
      const double dz = z - b.cz, dy = y - b.cy, dx = x - b.cx;
      const double r2 = dz * dz + dy * dy + dx * dx;
      v += b.amp * std::exp(-r2 / (2.0 * b.sigma * b.sigma));
    }
    return std::min(0.7, std::max(0.2, v));
  }
};

BackgroundField sample_background(const PhantomSpec& spec) {
  Rng rng = seeded_stream(spec.seed, "phantom.background");
  const double n = static_cast<double>(spec.size);
  const double c = (n - 1.0) / 2.0;
  BackgroundField f;
  f.brain = Ellipsoid{c, c, c, 0.46 * n, 0.44 * n, 0.44 * n};
  for (int i = 0; i < 3; ++i) {
    BackgroundField::Bump b;
    b.cz = rng.uniform(0.25 * n, 0.75 * n);
    b.cy = rng.uniform(0.25 * n, 0.75 * n);
    b.cx = rng.uniform(0.25 * n, 0.75 * n);
    b.sigma = rng.uniform(0.15 * n, 0.3 * n);
    b.amp = rng.uniform(-0.12, 0.12);
    f.bumps.push_back(b);
  }
  return f;
}

}  // namespace

std::vector<LesionGeometry> sample_lesions(const PhantomSpec& spec) {
  spec.validate();
  Rng rng = seeded_stream(spec.seed, "phantom.lesions");
  const double n = static_cast<double>(spec.size);
  const double c = (n - 1.0) / 2.0;
  std::vector<LesionGeometry> lesions;
  for (int i = 0; i < spec.num_lesions; ++i) {
    LesionGeometry les;
    les.outer.cz = c + rng.uniform(-0.2, 0.2) * n;
    les.outer.cy = c + rng.uniform(-0.2, 0.2) * n;
    les.outer.cx = c + rng.uniform(-0.2, 0.2) * n;
    les.outer.az = rng.uniform(0.14, 0.21) * n;
    les.outer.ay = rng.uniform(0.14, 0.21) * n;
    les.outer.ax = rng.uniform(0.14, 0.21) * n;
    const double mid_ratio = rng.uniform(0.62, 0.75);
    const double in_ratio = rng.uniform(0.50, 0.68);
    les.middle = les.outer;
    les.middle.az *= mid_ratio;
    les.middle.ay *= mid_ratio;
    les.middle.ax *= mid_ratio;
    les.inner = les.middle;
    les.inner.az *= in_ratio;
    les.inner.ay *= in_ratio;
    les.inner.ax *= in_ratio;
    lesions.push_back(les);
  }
  return lesions;
}

MultiModalVolume generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto lesions = sample_lesions(spec);
  const BackgroundField bg = sample_background(spec);
  const std::int64_t n = spec.size;

  MultiModalVolume vol;
  vol.label = LabelGrid(n, n, n);
  for (int m = 0; m < kNumModalities; ++m) {
    vol.modalities[m] = FloatGrid(n, n, n);
  }

  for (std::int64_t z = 0; z < n; ++z) {
    for (std::int64_t y = 0; y < n; ++y) {
      for (std::int64_t x = 0; x < n; ++x) {
        const double zd = static_cast<double>(z);
        const double yd = static_cast<double>(y);
        const double xd = static_cast<double>(x);
        // Innermost region wins when lesions overlap: ET > NCR/NET > ED.
        std::uint8_t lab = 0;
        for (const auto& les : lesions) {
          if (les.inner.contains(zd, yd, xd)) {
            lab = 3;
            break;
          }
        }
        if (lab == 0) {
          for (const auto& les : lesions) {
            if (les.middle.contains(zd, yd, xd)) {
              lab = 1;
              break;
            }
          }
        }
        if (lab == 0) {
          for (const auto& les : lesions) {
            if (les.outer.contains(zd, yd, xd)) {
              lab = 2;
              break;
            }
          }
        }
        vol.label.at(z, y, x) = lab;

        const double anatomy = bg.value(zd, yd, xd);
        for (int m = 0; m < kNumModalities; ++m) {
          const IntensityProfile& prof = spec.intensity_profiles[m];
          double v = lab == 0 ? anatomy
                              : prof.class_levels[static_cast<size_t>(lab - 1)];
          if (v <= 0.0) {
            vol.modalities[m].at(z, y, x) = 0.0f;
            continue;
          }
          double out = clamp01(prof.gain * std::pow(v, prof.gamma) + prof.bias);
          if (prof.invert) out = 1.0 - out;
          vol.modalities[m].at(z, y, x) = static_cast<float>(out);
        }
      }
    }
  }
  return vol;
}

MultiModalVolume preprocess_crop(const MultiModalVolume& v, std::int64_t crop,
                                 Rng& rng) {
  if (crop > v.dim_d() || crop > v.dim_h() || crop > v.dim_w() || crop < 1) {
    throw ShapeError("crop: requested " + std::to_string(crop) +
                     " exceeds volume dims");
  }
  const std::int64_t oz =
      static_cast<std::int64_t>(rng.uniform_int(
          static_cast<std::uint64_t>(v.dim_d() - crop + 1)));
  const std::int64_t oy =
      static_cast<std::int64_t>(rng.uniform_int(
          static_cast<std::uint64_t>(v.dim_h() - crop + 1)));
  const std::int64_t ox =
      static_cast<std::int64_t>(rng.uniform_int(
          static_cast<std::uint64_t>(v.dim_w() - crop + 1)));

  MultiModalVolume out;
  out.spacing = v.spacing;
  out.label = LabelGrid(crop, crop, crop);
  for (int m = 0; m < kNumModalities; ++m) {
    out.modalities[m] = FloatGrid(crop, crop, crop);
  }
  for (std::int64_t z = 0; z < crop; ++z) {
    for (std::int64_t y = 0; y < crop; ++y) {
      for (std::int64_t x = 0; x < crop; ++x) {
        out.label.at(z, y, x) = v.label.at(oz + z, oy + y, ox + x);
        for (int m = 0; m < kNumModalities; ++m) {
          out.modalities[m].at(z, y, x) =
              v.modalities[m].at(oz + z, oy + y, ox + x);
        }
      }
    }
  }
  return out;
}

template <typename T>
Grid3<T> flip_axis(const Grid3<T>& g, int axis) {
  Grid3<T> out(g.d, g.h, g.w);
  for (std::int64_t z = 0; z < g.d; ++z) {
    for (std::int64_t y = 0; y < g.h; ++y) {
      for (std::int64_t x = 0; x < g.w; ++x) {
        const std::int64_t sz = axis == 0 ? g.d - 1 - z : z;
        const std::int64_t sy = axis == 1 ? g.h - 1 - y : y;
        const std::int64_t sx = axis == 2 ? g.w - 1 - x : x;
        out.at(z, y, x) = g.at(sz, sy, sx);
      }
    }
  }
  return out;
}

template <typename T>
Grid3<T> rotate90(const Grid3<T>& g, int axis, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return g;
  // One quarter turn in the plane orthogonal to `axis`, repeated k times.
  Grid3<T> cur = g;
  for (int step = 0; step < k; ++step) {
    Grid3<T> out;
    if (axis == 0) {
      out = Grid3<T>(cur.d, cur.w, cur.h);
      for (std::int64_t z = 0; z < cur.d; ++z)
        for (std::int64_t y = 0; y < cur.h; ++y)
          for (std::int64_t x = 0; x < cur.w; ++x)
            out.at(z, cur.w - 1 - x, y) = cur.at(z, y, x);
    } else if (axis == 1) {
      out = Grid3<T>(cur.w, cur.h, cur.d);
      for (std::int64_t z = 0; z < cur.d; ++z)
        for (std::int64_t y = 0; y < cur.h; ++y)
          for (std::int64_t x = 0; x < cur.w; ++x)
            out.at(cur.w - 1 - x, y, z) = cur.at(z, y, x);
    } else {
      out = Grid3<T>(cur.h, cur.d, cur.w);
      for (std::int64_t z = 0; z < cur.d; ++z)
        for (std::int64_t y = 0; y < cur.h; ++y)
          for (std::int64_t x = 0; x < cur.w; ++x)
            out.at(cur.h - 1 - y, z, x) = cur.at(z, y, x);
    }
    cur = std::move(out);
  }
  return cur;
}

template Grid3<float> flip_axis<float>(const Grid3<float>&, int);
template Grid3<std::uint8_t> flip_axis<std::uint8_t>(const Grid3<std::uint8_t>&,
                                                     int);
template Grid3<float> rotate90<float>(const Grid3<float>&, int, int);
template Grid3<std::uint8_t> rotate90<std::uint8_t>(
    const Grid3<std::uint8_t>&, int, int);

MultiModalVolume augment(const MultiModalVolume& v, const AugmentConfig& cfg,
                         Rng& rng) {
  // Fixed draw order regardless of which transforms fire.
  std::array<bool, 3> flips{};
  for (int a = 0; a < 3; ++a) flips[a] = rng.bernoulli(cfg.flip_prob);
  const bool do_rot = rng.bernoulli(cfg.rot90_prob);
  const int rot_axis = static_cast<int>(rng.uniform_int(3));
  const int rot_k = 1 + static_cast<int>(rng.uniform_int(3));
  std::array<double, kNumModalities> scales;
  std::array<double, kNumModalities> shifts;
  for (int m = 0; m < kNumModalities; ++m) {
    scales[m] = rng.uniform(1.0 - cfg.intensity_scale,
                            1.0 + cfg.intensity_scale);
    shifts[m] = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift);
  }

  // Rotation requires the rotated pair of axes to have equal extents so
  // label maps stay exact; otherwise the draw degenerates to identity.
  std::array<std::int64_t, 3> dims{v.dim_d(), v.dim_h(), v.dim_w()};
  const bool rot_ok =
      (rot_axis == 0 && dims[1] == dims[2]) ||
      (rot_axis == 1 && dims[0] == dims[2]) ||
      (rot_axis == 2 && dims[0] == dims[1]);

  MultiModalVolume out = v;
  for (int a = 0; a < 3; ++a) {
    if (!flips[a]) continue;
    out.label = flip_axis(out.label, a);
    for (int m = 0; m < kNumModalities; ++m) {
      out.modalities[m] = flip_axis(out.modalities[m], a);
    }
  }
  if (do_rot && rot_ok) {
    out.label = rotate90(out.label, rot_axis, rot_k);
    for (int m = 0; m < kNumModalities; ++m) {
      out.modalities[m] = rotate90(out.modalities[m], rot_axis, rot_k);
    }
  }
  for (int m = 0; m < kNumModalities; ++m) {
    for (auto& f : out.modalities[m].data) {
      f = static_cast<float>(
          clamp01(static_cast<double>(f) * scales[m] + shifts[m]));
    }
  }
  return out;
}

MultiModalVolume apply_modality_mask(const MultiModalVolume& v,
                                     const ModalityMask& m) {
  if (!m.any()) {
    throw ProtocolError("modality mask: at least one modality required");
  }
  MultiModalVolume out = v;
  for (int i = 0; i < kNumModalities; ++i) {
    if (!m.available[i]) {
      std::fill(out.modalities[i].data.begin(), out.modalities[i].data.end(),
                0.0f);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// case directory I/O
// ---------------------------------------------------------------------------

namespace {

void write_raw(const std::string& path, const void* data, size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out.write(static_cast<const char*>(data),
            static_cast<std::streamsize>(bytes));
  if (!out) throw DataError("write failed: " + path);
}

std::vector<char> read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open payload file: " + path);
  const auto bytes = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<size_t>(bytes));
  in.read(buf.data(), bytes);
  if (!in) throw FormatError("read failed: " + path);
  return buf;
}

}  // namespace

void save_volume(const MultiModalVolume& v, const std::string& case_dir) {
  v.validate();
  fs::create_directories(case_dir);
  json meta;
  meta["dims"] = {v.dim_d(), v.dim_h(), v.dim_w()};
  meta["dtype"] = "f32";
  meta["modalities"] = json::array();
  for (const char* name : kModalityNames) meta["modalities"].push_back(name);
  meta["label_dtype"] = "u8";
  meta["byte_order"] = "little";
  meta["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  write_text_file((fs::path(case_dir) / "meta.json").string(),
                  meta.dump(2) + "\n");

  for (int m = 0; m < kNumModalities; ++m) {
    write_raw((fs::path(case_dir) / (std::string(kModalityNames[m]) + ".bin"))
                  .string(),
              v.modalities[m].data.data(),
              v.modalities[m].data.size() * sizeof(float));
  }
  write_raw((fs::path(case_dir) / "label.bin").string(), v.label.data.data(),
            v.label.data.size());
}

MultiModalVolume load_volume(const std::string& case_dir) {
  const fs::path dir(case_dir);
  const std::string meta_path = (dir / "meta.json").string();
  json meta;
  try {
    meta = json::parse(read_text_file(meta_path));
  } catch (const json::parse_error& e) {
    throw FormatError("meta.json: invalid JSON in " + meta_path + ": " +
                      e.what());
  }
  if (!meta.contains("dims") || !meta["dims"].is_array() ||
      meta["dims"].size() != 3) {
    throw FormatError("meta.json: field 'dims' must be a 3-element array");
  }
  const std::int64_t d = meta["dims"][0].get<std::int64_t>();
  const std::int64_t h = meta["dims"][1].get<std::int64_t>();
  const std::int64_t w = meta["dims"][2].get<std::int64_t>();
  if (d <= 0 || h <= 0 || w <= 0) {
    throw FormatError("meta.json: field 'dims' must be positive");
  }
  if (meta.value("dtype", "") != "f32") {
    throw FormatError("meta.json: field 'dtype' must be \"f32\"");
  }
  if (meta.value("label_dtype", "") != "u8") {
    throw FormatError("meta.json: field 'label_dtype' must be \"u8\"");
  }
  if (meta.value("byte_order", "") != "little") {
    throw FormatError("meta.json: field 'byte_order' must be \"little\"");
  }
  if (!meta.contains("modalities") || !meta["modalities"].is_array() ||
      meta["modalities"].size() != kNumModalities) {
    throw FormatError("meta.json: field 'modalities' must list 4 names");
  }
  for (int m = 0; m < kNumModalities; ++m) {
    if (meta["modalities"][m].get<std::string>() != kModalityNames[m]) {
      throw FormatError("meta.json: field 'modalities' must be "
                        "[flair,t1ce,t1,t2]");
    }
  }

  MultiModalVolume vol;
  if (meta.contains("spacing") && meta["spacing"].is_array() &&
      meta["spacing"].size() == 3) {
    for (int i = 0; i < 3; ++i) vol.spacing[i] = meta["spacing"][i].get<float>();
  }
  const std::int64_t voxels = d * h * w;
  for (int m = 0; m < kNumModalities; ++m) {
    const std::string path =
        (dir / (std::string(kModalityNames[m]) + ".bin")).string();
    const auto raw = read_raw(path);
    if (raw.size() != static_cast<size_t>(voxels) * sizeof(float)) {
      throw FormatError("payload '" + std::string(kModalityNames[m]) +
                        ".bin': size " + std::to_string(raw.size()) +
                        " bytes disagrees with dims");
    }
    vol.modalities[m] = FloatGrid(d, h, w);
    std::memcpy(vol.modalities[m].data.data(), raw.data(), raw.size());
  }
  const auto lraw = read_raw((dir / "label.bin").string());
  if (lraw.size() != static_cast<size_t>(voxels)) {
    throw FormatError("payload 'label.bin': size disagrees with dims");
  }
  vol.label = LabelGrid(d, h, w);
  std::memcpy(vol.label.data.data(), lraw.data(), lraw.size());
  vol.validate();
  return vol;
}

void normalize_modalities(MultiModalVolume& v) {
  for (int m = 0; m < kNumModalities; ++m) {
    float lo = 0.0f, hi = 0.0f;
    bool seen = false;
    for (float f : v.modalities[m].data) {
      if (f == 0.0f) continue;
      if (!seen) {
        lo = hi = f;
        seen = true;
      } else {
        lo = std::min(lo, f);
        hi = std::max(hi, f);
      }
    }
    if (!seen || hi <= lo) continue;
    const float range = hi - lo;
    for (float& f : v.modalities[m].data) {
      if (f != 0.0f) f = (f - lo) / range;
    }
  }
}

Tensor modalities_to_tensor(const MultiModalVolume& v) {
  const std::int64_t d = v.dim_d(), h = v.dim_h(), w = v.dim_w();
  Tensor t({kNumModalities, d, h, w});
  double* p = t.data();
  for (int m = 0; m < kNumModalities; ++m) {
    const auto& g = v.modalities[m].data;
    for (std::int64_t i = 0; i < d * h * w; ++i) {
      p[m * d * h * w + i] = static_cast<double>(g[static_cast<size_t>(i)]);
    }
  }
  return t;
}

Tensor label_to_tensor(const MultiModalVolume& v) {
  const std::int64_t n = v.label.size();
  Tensor t({v.dim_d(), v.dim_h(), v.dim_w()});
  double* p = t.data();
  for (std::int64_t i = 0; i < n; ++i) {
    p[i] = static_cast<double>(v.label.data[static_cast<size_t>(i)]);
  }
  return t;
}

void write_dataset_index(const std::string& dir,
                         const std::vector<std::string>& case_ids,
                         const std::string& origin_note) {
  json idx;
  idx["cases"] = case_ids;
  idx["origin"] = origin_note;
  write_text_file((fs::path(dir) / "dataset.json").string(),
                  idx.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const std::string idx_path = (fs::path(dir) / "dataset.json").string();
  json idx;
  try {
    idx = json::parse(read_text_file(idx_path));
  } catch (const json::parse_error& e) {
    throw FormatError("dataset.json: invalid JSON: " + std::string(e.what()));
  }
  if (!idx.contains("cases") || !idx["cases"].is_array()) {
    throw FormatError("dataset.json: field 'cases' must be an array");
  }
  Dataset ds;
  for (const auto& c : idx["cases"]) {
    const std::string id = c.get<std::string>();
    MultiModalVolume vol = load_volume((fs::path(dir) / id).string());
    bool in_range = true;
    for (const auto& g : vol.modalities) {
      for (float f : g.data) {
        if (f < 0.0f || f > 1.0f) {
          in_range = false;
          break;
        }
      }
      if (!in_range) break;
    }
    if (!in_range) normalize_modalities(vol);
    ds.case_ids.push_back(id);
    ds.cases.push_back(std::move(vol));
  }
  return ds;
}

}  // namespace acdis
