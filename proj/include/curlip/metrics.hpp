#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "curlip/errors.hpp"

namespace curlip {

struct Confusion {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Positive iff score >= threshold.
Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold = 0.5);

struct PointMetrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  // Zero-denominator cases report 0 with the matching flag set.
  bool accuracy_undefined = false, precision_undefined = false, recall_undefined = false,
       f1_undefined = false;
};

PointMetrics prf1(const Confusion& c);

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
};

// Threshold sweep over unique scores (ties grouped); starts at (0,0) and ends
// at (1,1). Throws DegenerateLabels without both classes present.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal area under roc_curve; equals P(s+ > s-) + 0.5 P(s+ = s-).
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

inline const std::vector<double> kDefaultFprLevels{1e-4, 1e-3, 1e-2, 1e-1};

// Conservative step rule: for each level, the best TPR among operating points
// with FPR <= level. No interpolation.
std::map<double, double> tpr_at_fpr(const std::vector<double>& scores,
                                    const std::vector<int>& labels,
                                    const std::vector<double>& levels = kDefaultFprLevels);

struct ClassReport {
  std::string name;
  Confusion cm;
  PointMetrics point;
  double auc = 0.0;
};

struct MacroReport {
  std::vector<RocPoint> roc;  // mean TPR on a fixed 1001-point FPR grid
  double auc = 0.0;
};

struct EvalReport {
  Confusion cm;
  PointMetrics point;
  std::vector<RocPoint> roc;
  double auc = 0.0;
  std::map<double, double> tpr_at_fpr;
  double threshold = 0.5;
  std::vector<ClassReport> per_class;     // multi-class only
  std::optional<MacroReport> macro;       // multi-class only

  nlohmann::json to_json() const;
};

EvalReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels,
                         double threshold = 0.5);

// One-vs-rest per class (argmax predictions for the point metrics) plus a
// macro ROC averaged on a shared 1001-point FPR grid.
EvalReport multiclass_report(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& labels,
                             const std::vector<std::string>& class_names);

void write_roc_csv(const std::vector<RocPoint>& roc, const std::string& path);

}  // namespace curlip
