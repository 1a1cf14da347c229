#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "druseg/common.hpp"
#include "druseg/tensor.hpp"

namespace druseg {

// Confidences at or above the threshold become foreground.
inline Tensor binarize(const Tensor& confidences, double threshold = 0.5) {
  Tensor out = confidences;
  for (auto& v : out.values()) v = v >= threshold ? 1.0 : 0.0;
  return out;
}

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;
};

inline Confusion confusion(const Tensor& prediction, const Tensor& truth) {
  if (!prediction.same_shape(truth)) {
    throw ShapeError("confusion: prediction shape " +
                     prediction.shape_string() + " does not match truth " +
                     truth.shape_string());
  }
  Confusion c;
  const double* p = prediction.data();
  const double* t = truth.data();
  for (std::int64_t i = 0; i < prediction.numel(); ++i) {
    if ((p[i] != 0.0 && p[i] != 1.0) || (t[i] != 0.0 && t[i] != 1.0)) {
      throw ValueError("confusion: inputs must be binary masks");
    }
    if (p[i] == 1.0) {
      (t[i] == 1.0 ? c.tp : c.fp) += 1;
    } else {
      (t[i] == 1.0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

inline void accumulate(Confusion& into, const Confusion& c) {
  into.tp += c.tp;
  into.fp += c.fp;
  into.fn += c.fn;
  into.tn += c.tn;
}

// J = tp / (tp + fp + fn); an image with no foreground anywhere scores 1.
inline double jaccard_index(const Confusion& c) {
  const std::int64_t denom = c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

// D = 2 tp / (2 tp + fp + fn); same degenerate convention as the Jaccard.
inline double dice_coefficient(const Confusion& c) {
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

struct PerImageMetrics {
  std::string id;
  double jaccard = 0.0;
  double dice = 0.0;
};

// Two reporting conventions side by side: the mean of per-image scores, and
// the scores of the summed confusion counts.
struct EvalReport {
  std::vector<PerImageMetrics> per_image;
  double mean_jaccard = 0.0;
  double mean_dice = 0.0;
  double aggregate_jaccard = 0.0;
  double aggregate_dice = 0.0;
  Confusion totals;
};

inline EvalReport evaluate(const std::vector<Tensor>& predictions,
                           const std::vector<Tensor>& truths,
                           const std::vector<std::string>& ids = {}) {
  if (predictions.size() != truths.size()) {
    throw ValueError("evaluate: " + std::to_string(predictions.size()) +
                     " predictions vs " + std::to_string(truths.size()) +
                     " truths");
  }
  if (!ids.empty() && ids.size() != predictions.size()) {
    throw ValueError("evaluate: id list length does not match predictions");
  }
  if (predictions.empty()) {
    throw ValueError("evaluate: no images");
  }
  EvalReport report;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Confusion c = confusion(binarize(predictions[i]),
                                  binarize(truths[i]));
    PerImageMetrics m;
    m.id = ids.empty() ? "img_" + std::to_string(i) : ids[i];
    m.jaccard = jaccard_index(c);
    m.dice = dice_coefficient(c);
    report.per_image.push_back(m);
    accumulate(report.totals, c);
    report.mean_jaccard += m.jaccard;
    report.mean_dice += m.dice;
  }
  report.mean_jaccard /= static_cast<double>(predictions.size());
  report.mean_dice /= static_cast<double>(predictions.size());
  report.aggregate_jaccard = jaccard_index(report.totals);
  report.aggregate_dice = dice_coefficient(report.totals);
  return report;
}

// Tab-separated report: header, one row per image, then MEAN and AGGREGATE
// footer rows. Values carry six decimal places.
inline void write_report_tsv(const EvalReport& report,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_report_tsv: cannot open " + path);
  out << "id\tjaccard\tdice\n" << std::fixed << std::setprecision(6);
  for (const auto& m : report.per_image) {
    out << m.id << "\t" << m.jaccard << "\t" << m.dice << "\n";
  }
  out << "MEAN\t" << report.mean_jaccard << "\t" << report.mean_dice << "\n";
  out << "AGGREGATE\t" << report.aggregate_jaccard << "\t"
      << report.aggregate_dice << "\n";
  if (!out) throw IoError("write_report_tsv: write failed for " + path);
}

// "0.55 (0.71)" — Jaccard with Dice in parentheses, two decimals.
inline std::string format_score_pair(double jaccard, double dice) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << jaccard << " (" << dice << ")";
  return os.str();
}

// Checks that two-decimal reported values of Jaccard and Dice can describe
// the same underlying score. Each printed value stands for an interval of
// width 0.01; the pair is consistent when the monotone map d = 2j/(1+j)
// sends some point of the Jaccard interval into the Dice interval.
inline bool jaccard_dice_pair_consistent(double jaccard2dp, double dice2dp) {
  const auto to_dice = [](double j) { return 2.0 * j / (1.0 + j); };
  const double lo = to_dice(jaccard2dp - 0.005);
  const double hi = to_dice(jaccard2dp + 0.005);
  return hi >= dice2dp - 0.005 - 1e-12 && lo <= dice2dp + 0.005 + 1e-12;
}

}  // namespace druseg
