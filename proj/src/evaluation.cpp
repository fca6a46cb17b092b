#include "acdis/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace acdis {
namespace eval {

RegionMasks to_regions(const LabelGrid& label) {
  RegionMasks r;
  r.d = label.d;
  r.h = label.h;
  r.w = label.w;
  const size_t n = label.data.size();
  r.wt.resize(n);
  r.tc.resize(n);
  r.et.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const std::uint8_t v = label.data[i];
    if (v >= kNumClasses) {
      throw ValueError("regions: label value out of range");
    }
    r.wt[i] = v != 0 ? 1 : 0;
    r.tc[i] = (v == 1 || v == 3) ? 1 : 0;
    r.et[i] = v == 3 ? 1 : 0;
  }
  return r;
}

double dice(const std::vector<std::uint8_t>& pred,
            const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("dice: mask sizes differ");
  }
  std::int64_t inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    a += p ? 1 : 0;
    b += g ? 1 : 0;
    inter += (p && g) ? 1 : 0;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

void DiceTable::recompute_avg() {
  for (int r = 0; r < 3; ++r) {
    double acc = 0.0;
    for (int c = 0; c < kNumEvalMasks; ++c) {
      acc += cells[static_cast<size_t>(r)][static_cast<size_t>(c)];
    }
    avg[static_cast<size_t>(r)] = acc / static_cast<double>(kNumEvalMasks);
  }
}

LabelGrid argmax_labels(const Tensor& logits) {
  if (logits.ndim() != 5 || logits.dim(0) != 1) {
    throw ShapeError("argmax: expects (1,K,D,H,W) logits");
  }
  const std::int64_t kc = logits.dim(1);
  const std::int64_t d = logits.dim(2), h = logits.dim(3), w = logits.dim(4);
  const std::int64_t vox = d * h * w;
  LabelGrid out(d, h, w);
  const double* p = logits.data();
  for (std::int64_t v = 0; v < vox; ++v) {
    int best = 0;
    double best_val = p[v];
    for (std::int64_t c = 1; c < kc; ++c) {
      const double val = p[c * vox + v];
      if (val > best_val) {
        best_val = val;
        best = static_cast<int>(c);
      }
    }
    out.data[static_cast<size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

namespace {

// Center-crop every axis down to a multiple of the model's downsampling
// factor; evaluation scores are computed on the same crop of the label.
MultiModalVolume crop_for_model(const MultiModalVolume& v, int depth) {
  const std::int64_t div = std::int64_t{1} << depth;
  const std::int64_t nd = (v.dim_d() / div) * div;
  const std::int64_t nh = (v.dim_h() / div) * div;
  const std::int64_t nw = (v.dim_w() / div) * div;
  if (nd == 0 || nh == 0 || nw == 0) {
    throw ShapeError("evaluate: volume smaller than the downsampling factor");
  }
  if (nd == v.dim_d() && nh == v.dim_h() && nw == v.dim_w()) return v;
  const std::int64_t oz = (v.dim_d() - nd) / 2;
  const std::int64_t oy = (v.dim_h() - nh) / 2;
  const std::int64_t ox = (v.dim_w() - nw) / 2;
  MultiModalVolume out;
  out.spacing = v.spacing;
  out.label = LabelGrid(nd, nh, nw);
  for (int m = 0; m < kNumModalities; ++m) {
    out.modalities[m] = FloatGrid(nd, nh, nw);
  }
  for (std::int64_t z = 0; z < nd; ++z) {
    for (std::int64_t y = 0; y < nh; ++y) {
      for (std::int64_t x = 0; x < nw; ++x) {
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

std::array<double, 3> score_case(const net::AcdisModel& model,
                                 const MultiModalVolume& prepared,
                                 const ModalityMask& mask) {
  const MultiModalVolume masked = apply_modality_mask(prepared, mask);
  const Tensor mv = modalities_to_tensor(masked);
  Tensor vol({1, kNumModalities, masked.dim_d(), masked.dim_h(),
              masked.dim_w()});
  std::copy(mv.data(), mv.data() + mv.size(), vol.data());

  // Read-only forward: parameters enter the graph as constants.
  nn::ParamStore& store = const_cast<nn::ParamStore&>(model.params());
  nn::Ctx ctx(store, false);
  net::ForwardResult fwd =
      model.forward_full(ctx, vol, mask, net::Phase::kInference);
  const LabelGrid pred = argmax_labels(fwd.heads[0]->value);
  const RegionMasks pr = to_regions(pred);
  const RegionMasks gt = to_regions(prepared.label);
  return {dice(pr.wt, gt.wt), dice(pr.tc, gt.tc), dice(pr.et, gt.et)};
}

}  // namespace

EvalReport evaluate_all_masks(const net::AcdisModel& model,
                              const Dataset& dataset, int workers) {
  if (dataset.size() == 0) {
    throw ConfigError("evaluate: dataset is empty");
  }
  EvalReport rep;
  rep.case_ids = dataset.case_ids;
  rep.masks = enumerate_masks();
  const int n_cases = static_cast<int>(dataset.size());
  const int n_masks = static_cast<int>(rep.masks.size());

  std::vector<MultiModalVolume> prepared;
  prepared.reserve(dataset.size());
  for (const auto& v : dataset.cases) {
    prepared.push_back(crop_for_model(v, model.config().encoder_depth));
  }

  rep.per_case.assign(static_cast<size_t>(n_masks),
                      std::vector<std::array<double, 3>>(
                          static_cast<size_t>(n_cases), {0.0, 0.0, 0.0}));

  // Order-independent assembly: each (mask, case) cell is written by
  // exactly one worker.
  const int total = n_masks * n_cases;
  const int nthreads = std::max(1, std::min(workers, total));
  auto run_range = [&](int lo, int hi) {
    for (int idx = lo; idx < hi; ++idx) {
      const int mi = idx / n_cases;
      const int ci = idx % n_cases;
      rep.per_case[static_cast<size_t>(mi)][static_cast<size_t>(ci)] =
          score_case(model, prepared[static_cast<size_t>(ci)],
                     rep.masks[static_cast<size_t>(mi)]);
    }
  };
  if (nthreads == 1) {
    run_range(0, total);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (total + nthreads - 1) / nthreads;
    for (int t = 0; t < nthreads; ++t) {
      const int lo = t * chunk;
      const int hi = std::min(total, lo + chunk);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  for (int mi = 0; mi < n_masks; ++mi) {
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (int ci = 0; ci < n_cases; ++ci) {
        acc += rep.per_case[static_cast<size_t>(mi)][static_cast<size_t>(ci)]
                          [static_cast<size_t>(r)];
      }
      rep.table.cells[static_cast<size_t>(r)][static_cast<size_t>(mi)] =
          acc / static_cast<double>(n_cases);
    }
  }
  rep.table.recompute_avg();
  return rep;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

std::string dice_table_to_csv(const DiceTable& table) {
  const auto masks = enumerate_masks();
  std::ostringstream os;
  os << "region";
  for (const auto& m : masks) os << "," << m.glyphs();
  os << ",AVG\n";
  for (int r = 0; r < 3; ++r) {
    os << kRegionNames[static_cast<size_t>(r)];
    for (int c = 0; c < kNumEvalMasks; ++c) {
      os << ","
         << format_double(
                table.cells[static_cast<size_t>(r)][static_cast<size_t>(c)]);
    }
    os << "," << format_double(table.avg[static_cast<size_t>(r)]) << "\n";
  }
  return os.str();
}

DiceTable dice_table_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("dice csv: empty file");
  const auto masks = enumerate_masks();
  {
    std::istringstream hs(line);
    std::string cell;
    std::getline(hs, cell, ',');
    if (cell != "region") throw FormatError("dice csv: bad header");
    for (int c = 0; c < kNumEvalMasks; ++c) {
      if (!std::getline(hs, cell, ',')) {
        throw FormatError("dice csv: truncated header");
      }
      if (cell != masks[static_cast<size_t>(c)].glyphs()) {
        throw FormatError("dice csv: mask column order mismatch");
      }
    }
  }
  DiceTable t;
  for (int r = 0; r < 3; ++r) {
    if (!std::getline(is, line)) throw FormatError("dice csv: missing row");
    std::istringstream rs(line);
    std::string cell;
    std::getline(rs, cell, ',');
    if (cell != kRegionNames[static_cast<size_t>(r)]) {
      throw FormatError("dice csv: unexpected region row '" + cell + "'");
    }
    for (int c = 0; c < kNumEvalMasks; ++c) {
      if (!std::getline(rs, cell, ',')) {
        throw FormatError("dice csv: truncated row");
      }
      t.cells[static_cast<size_t>(r)][static_cast<size_t>(c)] =
          std::stod(cell);
    }
    if (!std::getline(rs, cell, ',')) {
      throw FormatError("dice csv: missing AVG cell");
    }
    t.avg[static_cast<size_t>(r)] = std::stod(cell);
  }
  return t;
}

namespace {

std::string dice_table_to_markdown(const DiceTable& table) {
  const auto masks = enumerate_masks();
  std::ostringstream os;
  os << "| M |";
  for (int c = 1; c <= kNumEvalMasks; ++c) os << " " << c << " |";
  os << " AVG |\n";
  os << "|---|";
  for (int c = 0; c <= kNumEvalMasks; ++c) os << "---|";
  os << "\n";
  for (int m = 0; m < kNumModalities; ++m) {
    os << "| " << kModalityDisplay[m] << " |";
    for (const auto& mask : masks) {
      os << " " << (mask.available[static_cast<size_t>(m)] ? "●" : "○")
         << " |";
    }
    os << "  |\n";
  }
  os.setf(std::ios::fixed);
  os.precision(4);
  for (int r = 0; r < 3; ++r) {
    os << "| " << kRegionNames[static_cast<size_t>(r)] << " |";
    for (int c = 0; c < kNumEvalMasks; ++c) {
      os << " " << table.cells[static_cast<size_t>(r)][static_cast<size_t>(c)]
         << " |";
    }
    os << " " << table.avg[static_cast<size_t>(r)] << " |\n";
  }
  return os.str();
}

std::string bar_chart_svg(const std::string& title,
                          const std::array<double, kNumEvalMasks>& values,
                          double avg) {
  const auto masks = enumerate_masks();
  const int bar_w = 34, gap = 8, left = 50, bottom = 40, top = 30;
  const int plot_h = 220;
  const int width = left + kNumEvalMasks * (bar_w + gap) + 20;
  const int height = top + plot_h + bottom;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"14\">" << title
     << " (avg " << format_double(avg) << ")</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const int y = top + plot_h - i * plot_h / 4;
    os << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\""
       << width - 10 << "\" y2=\"" << y
       << "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
    os << "<text x=\"8\" y=\"" << y + 4 << "\" font-size=\"10\">"
       << 0.25 * i << "</text>\n";
  }
  for (int c = 0; c < kNumEvalMasks; ++c) {
    const double v = std::min(1.0, std::max(0.0, values[static_cast<size_t>(c)]));
    const int h = static_cast<int>(std::lround(v * plot_h));
    const int x = left + c * (bar_w + gap);
    os << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\""
       << bar_w << "\" height=\"" << h << "\" fill=\"#4878a8\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << top + plot_h + 14
       << "\" font-size=\"9\">" << masks[static_cast<size_t>(c)].bits()
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json report_to_json(const EvalReport& rep, const std::string& run_note) {
  json j;
  j["note"] = run_note;
  j["regions"] = {"WT", "TC", "ET"};
  j["case_ids"] = rep.case_ids;
  json masks = json::array();
  for (const auto& m : rep.masks) masks.push_back(m.bits());
  j["masks"] = masks;
  json per_case = json::array();
  for (const auto& mask_scores : rep.per_case) {
    json row = json::array();
    for (const auto& s : mask_scores) row.push_back({s[0], s[1], s[2]});
    per_case.push_back(row);
  }
  j["per_case"] = per_case;
  json cells = json::array();
  for (int r = 0; r < 3; ++r) {
    cells.push_back(rep.table.cells[static_cast<size_t>(r)]);
  }
  j["table"] = {{"cells", cells}, {"avg", rep.table.avg}};
  return j;
}

}  // namespace

void render_report(const EvalReport& report, const std::string& out_dir,
                   const std::string& run_note) {
  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "dice_table.csv").string(),
                  dice_table_to_csv(report.table));
  write_text_file((fs::path(out_dir) / "dice_table.md").string(),
                  dice_table_to_markdown(report.table));
  write_text_file((fs::path(out_dir) / "report.json").string(),
                  report_to_json(report, run_note).dump(2) + "\n");
  const std::array<std::string, 3> files = {"dice_wt.svg", "dice_tc.svg",
                                            "dice_et.svg"};
  for (int r = 0; r < 3; ++r) {
    write_text_file(
        (fs::path(out_dir) / files[static_cast<size_t>(r)]).string(),
        bar_chart_svg(std::string("Dice ") + kRegionNames[static_cast<size_t>(r)],
                      report.table.cells[static_cast<size_t>(r)],
                      report.table.avg[static_cast<size_t>(r)]));
  }
}

EvalReport report_from_json_file(const std::string& report_json_path) {
  json j;
  try {
    j = json::parse(read_text_file(report_json_path));
  } catch (const json::parse_error& e) {
    throw FormatError("report.json: invalid JSON: " + std::string(e.what()));
  }
  EvalReport rep;
  rep.case_ids = j.at("case_ids").get<std::vector<std::string>>();
  rep.masks = enumerate_masks();
  const auto mask_bits = j.at("masks").get<std::vector<std::string>>();
  if (mask_bits.size() != static_cast<size_t>(kNumEvalMasks)) {
    throw FormatError("report.json: expected 15 masks");
  }
  for (int i = 0; i < kNumEvalMasks; ++i) {
    if (mask_bits[static_cast<size_t>(i)] !=
        rep.masks[static_cast<size_t>(i)].bits()) {
      throw FormatError("report.json: mask order mismatch");
    }
  }
  const auto& per_case = j.at("per_case");
  const size_t n_cases = rep.case_ids.size();
  rep.per_case.assign(static_cast<size_t>(kNumEvalMasks),
                      std::vector<std::array<double, 3>>(n_cases));
  for (int mi = 0; mi < kNumEvalMasks; ++mi) {
    const auto& row = per_case.at(static_cast<size_t>(mi));
    if (row.size() != n_cases) {
      throw FormatError("report.json: per_case arity mismatch");
    }
    for (size_t ci = 0; ci < n_cases; ++ci) {
      for (int r = 0; r < 3; ++r) {
        rep.per_case[static_cast<size_t>(mi)][ci][static_cast<size_t>(r)] =
            row.at(ci).at(static_cast<size_t>(r)).get<double>();
      }
    }
  }
  // Re-aggregate with the same arithmetic evaluate_all_masks uses.
  for (int mi = 0; mi < kNumEvalMasks; ++mi) {
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (size_t ci = 0; ci < n_cases; ++ci) {
        acc += rep.per_case[static_cast<size_t>(mi)][ci][static_cast<size_t>(r)];
      }
      rep.table.cells[static_cast<size_t>(r)][static_cast<size_t>(mi)] =
          acc / static_cast<double>(n_cases);
    }
  }
  rep.table.recompute_avg();
  return rep;
}

}  // namespace eval
}  // namespace acdis
