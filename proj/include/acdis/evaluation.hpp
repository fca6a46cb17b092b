#ifndef ACDIS_EVALUATION_HPP_
#define ACDIS_EVALUATION_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "acdis/network.hpp"
#include "acdis/volume.hpp"

namespace acdis {
namespace eval {

inline constexpr int kNumEvalMasks = 15;
inline constexpr std::array<const char*, 3> kRegionNames = {"WT", "TC", "ET"};

// Nested tumor regions derived from the 4-class label map:
// WT = {1,2,3}, TC = {1,3}, ET = {3}.
struct RegionMasks {
  std::int64_t d = 0, h = 0, w = 0;
  std::vector<std::uint8_t> wt, tc, et;
};

RegionMasks to_regions(const LabelGrid& label);

// Dice = 2|A∩B| / (|A|+|B|); both empty -> 1.0 (perfect agreement on
// absence).
double dice(const std::vector<std::uint8_t>& pred,
            const std::vector<std::uint8_t>& gt);

struct DiceTable {
  // rows: WT, TC, ET; columns: the 15 masks in protocol order.
  std::array<std::array<double, kNumEvalMasks>, 3> cells{};
  std::array<double, 3> avg{};

  void recompute_avg();
  bool operator==(const DiceTable& o) const {
    return cells == o.cells && avg == o.avg;
  }
};

struct EvalReport {
  std::vector<std::string> case_ids;
  std::vector<ModalityMask> masks;
  // per_case[mask][case] = {WT, TC, ET}
  std::vector<std::vector<std::array<double, 3>>> per_case;
  DiceTable table;
};

// Runs the inference path (available encoders + enhancement + synthesis +
// fusion decoder) for each of the 15 masks over every case; volumes are
// center-cropped to a multiple of the downsampling factor when needed.
EvalReport evaluate_all_masks(const net::AcdisModel& model,
                              const Dataset& dataset, int workers = 1);

// Argmax class map from (1,K,D,H,W) logits.
LabelGrid argmax_labels(const Tensor& logits);

// Emits dice_table.csv, dice_table.md, report.json and one bar chart per
// region under out_dir. The CSV is byte-stable for fixed input.
void render_report(const EvalReport& report, const std::string& out_dir,
                   const std::string& run_note);

std::string dice_table_to_csv(const DiceTable& table);
DiceTable dice_table_from_csv(const std::string& csv);

// Rebuild the table from the per-case scores in report.json and re-emit
// all artifacts (idempotent with respect to evaluate's own output).
EvalReport report_from_json_file(const std::string& report_json_path);

}  // namespace eval
}  // namespace acdis

#endif  // ACDIS_EVALUATION_HPP_
