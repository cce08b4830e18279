#include "curlip/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace curlip {

Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold) {
  if (scores.size() != labels.size())
    throw LengthMismatch("confusion: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  Confusion c;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] != 0;
    if (pred && pos) c.tp += 1;
    else if (pred && !pos) c.fp += 1;
    else if (!pred && !pos) c.tn += 1;
    else c.fn += 1;
  }
  return c;
}

PointMetrics prf1(const Confusion& c) {
  PointMetrics m;
  const int64_t total = c.tp + c.fp + c.tn + c.fn;
  if (total > 0) m.accuracy = (double)(c.tp + c.tn) / (double)total;
  else m.accuracy_undefined = true;
  if (c.tp + c.fp > 0) m.precision = (double)c.tp / (double)(c.tp + c.fp);
  else m.precision_undefined = true;
  if (c.tp + c.fn > 0) m.recall = (double)c.tp / (double)(c.tp + c.fn);
  else m.recall_undefined = true;
  if (!m.precision_undefined && !m.recall_undefined && m.precision + m.recall > 0.0)
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  else
    m.f1_undefined = true;
  return m;
}

namespace {

void check_scored(const std::vector<double>& scores, const std::vector<int>& labels, int64_t& P,
                  int64_t& N) {
  if (scores.size() != labels.size())
    throw LengthMismatch("scored set: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  P = N = 0;
  for (int l : labels) (l != 0 ? P : N) += 1;
  if (P == 0 || N == 0)
    throw DegenerateLabels("ROC needs at least one positive and one negative");
}

}  // namespace

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  int64_t P = 0, N = 0;
  check_scored(scores, labels, P, N);

  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&scores](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0});
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < idx.size()) {
    const double s = scores[idx[i]];
    // group all samples with a tied score into one step
    while (i < idx.size() && scores[idx[i]] == s) {
      (labels[idx[i]] != 0 ? tp : fp) += 1;
      ++i;
    }
    roc.push_back({(double)fp / (double)N, (double)tp / (double)P});
  }
  return roc;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto roc = roc_curve(scores, labels);
  double area = 0.0;
  for (size_t i = 1; i < roc.size(); ++i)
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  return area;
}

std::map<double, double> tpr_at_fpr(const std::vector<double>& scores,
                                    const std::vector<int>& labels,
                                    const std::vector<double>& levels) {
  const auto roc = roc_curve(scores, labels);
  std::map<double, double> out;
  for (double level : levels) {
    double best = 0.0;
    for (const auto& p : roc)
      if (p.fpr <= level) best = std::max(best, p.tpr);
    out[level] = best;
  }
  return out;
}

namespace {

nlohmann::json point_json(const PointMetrics& m) {
  return nlohmann::json{{"accuracy", m.accuracy},
                        {"precision", m.precision},
                        {"recall", m.recall},
                        {"f1", m.f1},
                        {"flags",
                         {{"accuracy_undefined", m.accuracy_undefined},
                          {"precision_undefined", m.precision_undefined},
                          {"recall_undefined", m.recall_undefined},
                          {"f1_undefined", m.f1_undefined}}}};
}

nlohmann::json roc_json(const std::vector<RocPoint>& roc) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : roc) arr.push_back({p.fpr, p.tpr});
  return arr;
}

std::string level_key(double level) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", level);
  return buf;
}

// Linear interpolation of the ROC polyline at a grid position. Vertical
// segments (several points sharing one fpr) resolve to their top point.
double interp_tpr(const std::vector<RocPoint>& roc, double x) {
  double exact = -1.0;
  for (const auto& p : roc)
    if (p.fpr == x) exact = std::max(exact, p.tpr);
  if (exact >= 0.0) return exact;
  for (size_t i = 1; i < roc.size(); ++i) {
    if (roc[i - 1].fpr < x && x < roc[i].fpr) {
      const double t = (x - roc[i - 1].fpr) / (roc[i].fpr - roc[i - 1].fpr);
      return roc[i - 1].tpr + t * (roc[i].tpr - roc[i - 1].tpr);
    }
  }
  return roc.back().tpr;
}

}  // namespace

EvalReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels,
                         double threshold) {
  EvalReport rep;
  rep.threshold = threshold;
  rep.cm = confusion(scores, labels, threshold);
  rep.point = prf1(rep.cm);
  rep.roc = roc_curve(scores, labels);
  rep.auc = auc(scores, labels);
  rep.tpr_at_fpr = tpr_at_fpr(scores, labels);
  return rep;
}

EvalReport multiclass_report(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& labels,
                             const std::vector<std::string>& class_names) {
  if (scores.size() != labels.size())
    throw LengthMismatch("multiclass_report: score/label count mismatch");
  if (scores.empty()) throw DegenerateLabels("multiclass_report: empty input");
  const size_t K = scores[0].size();
  if (K < 2) throw DegenerateLabels("multiclass_report: need at least two classes");

  std::vector<int> preds(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != K) throw LengthMismatch("multiclass_report: ragged score rows");
    preds[i] = (int)(std::max_element(scores[i].begin(), scores[i].end()) - scores[i].begin());
  }

  EvalReport rep;
  const int grid_points = 1001;
  std::vector<double> macro_tpr((size_t)grid_points, 0.0);

  for (size_t k = 0; k < K; ++k) {
    std::vector<int> ovr_labels(labels.size());
    std::vector<double> ovr_scores(labels.size());
    int64_t class_count = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      ovr_labels[i] = labels[i] == (int)k ? 1 : 0;
      ovr_scores[i] = scores[i][k];
      class_count += ovr_labels[i];
    }
    if (class_count == 0)
      throw DegenerateLabels("multiclass_report: class " + std::to_string(k) +
                             " has no examples");

    ClassReport cr;
    cr.name = k < class_names.size() ? class_names[k] : "class" + std::to_string(k);
    Confusion cm;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool pred = preds[i] == (int)k;
      const bool pos = ovr_labels[i] != 0;
      if (pred && pos) cm.tp += 1;
      else if (pred && !pos) cm.fp += 1;
      else if (!pred && !pos) cm.tn += 1;
      else cm.fn += 1;
    }
    cr.cm = cm;
    cr.point = prf1(cm);
    const auto roc = roc_curve(ovr_scores, ovr_labels);
    cr.auc = auc(ovr_scores, ovr_labels);
    for (int g = 0; g < grid_points; ++g)
      macro_tpr[(size_t)g] += interp_tpr(roc, (double)g / (double)(grid_points - 1));
    rep.per_class.push_back(std::move(cr));
  }

  MacroReport macro;
  for (int g = 0; g < grid_points; ++g) {
    const double x = (double)g / (double)(grid_points - 1);
    macro.roc.push_back({x, macro_tpr[(size_t)g] / (double)K});
  }
  for (size_t i = 1; i < macro.roc.size(); ++i)
    macro.auc += (macro.roc[i].fpr - macro.roc[i - 1].fpr) *
                 (macro.roc[i].tpr + macro.roc[i - 1].tpr) * 0.5;
  rep.macro = std::move(macro);

  // Headline block: micro point metrics over argmax correctness are less
  // meaningful here, so report the macro means instead.
  double acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0;
  for (const auto& c : rep.per_class) {
    acc += c.point.accuracy;
    prec += c.point.precision;
    rec += c.point.recall;
    f1 += c.point.f1;
    rep.cm.tp += c.cm.tp;
    rep.cm.fp += c.cm.fp;
    rep.cm.tn += c.cm.tn;
    rep.cm.fn += c.cm.fn;
  }
  rep.point.accuracy = acc / (double)K;
  rep.point.precision = prec / (double)K;
  rep.point.recall = rec / (double)K;
  rep.point.f1 = f1 / (double)K;
  rep.auc = rep.macro->auc;
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j{{"tp", cm.tp},
                   {"fp", cm.fp},
                   {"tn", cm.tn},
                   {"fn", cm.fn},
                   {"accuracy", point.accuracy},
                   {"precision", point.precision},
                   {"recall", point.recall},
                   {"f1", point.f1},
                   {"flags",
                    {{"accuracy_undefined", point.accuracy_undefined},
                     {"precision_undefined", point.precision_undefined},
                     {"recall_undefined", point.recall_undefined},
                     {"f1_undefined", point.f1_undefined}}},
                   {"auc", auc},
                   {"threshold", threshold},
                   {"roc", roc_json(roc)}};
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [level, tpr] : tpr_at_fpr) levels[level_key(level)] = tpr;
  j["tpr_at_fpr"] = levels;
  if (!per_class.empty()) {
    nlohmann::json pcs = nlohmann::json::array();
    for (const auto& c : per_class) {
      nlohmann::json pc = point_json(c.point);
      pc["name"] = c.name;
      pc["auc"] = c.auc;
      pc["tp"] = c.cm.tp;
      pc["fp"] = c.cm.fp;
      pc["tn"] = c.cm.tn;
      pc["fn"] = c.cm.fn;
      pcs.push_back(pc);
    }
    j["per_class"] = pcs;
  }
  if (macro) j["macro"] = {{"auc", macro->auc}, {"roc", roc_json(macro->roc)}};
  return j;
}

void write_roc_csv(const std::vector<RocPoint>& roc, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write ROC csv: " + path);
  out << "fpr,tpr\n";
  char buf[64];
  for (const auto& p : roc) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", p.fpr, p.tpr);
    out << buf;
  }
}

}  // namespace curlip
