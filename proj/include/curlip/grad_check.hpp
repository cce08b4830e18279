#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "curlip/model_state.hpp"
#include "curlip/rng.hpp"

namespace curlip {

struct GradCheckOptions {
  double h = 1e-5;
  int max_coords_per_param = 64;
  uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  int64_t coords_indeterminate = 0;  // every stencil straddled a relu kink
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;

  bool pass(double threshold) const { return max_rel_err < threshold; }
};

// loss_fn(state, want_grads, sig_out): evaluates the scalar loss; fills every
// trainable gradient when want_grads; reports the tape's relu branch
// signature through sig_out when non-null. Must be a pure, deterministic
// function of the parameter values.
using GradCheckFn = std::function<double(ModelState<double>&, bool, uint64_t*)>;

// Optional high-precision evaluation of the same loss, used as a low-noise
// fallback stencil. Forward only.
using GradCheckFnLd = std::function<long double(ModelState<long double>&, uint64_t*)>;

// Central-difference verification of analytic gradients against loss_fn.
//
// Finite differences are only meaningful on a stencil that stays inside one
// piecewise-linear region of the relus, so stencils whose endpoint signatures
// differ are discarded and retried at a ten-times-finer step. A coordinate
// whose every stencil straddles a kink is counted indeterminate and another
// coordinate is sampled in its place; a genuinely wrong gradient still fails
// because it disagrees with the estimate on every clean stencil.
inline GradCheckReport grad_check(ModelState<double>& state, const GradCheckFn& loss_fn,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  state.zero_grads();
  (void)loss_fn(state, true, nullptr);

  Rng rng(opts.seed ^ 0x67ad3c1u);
  for (auto& [name, p] : state.params) {
    if (!p.trainable) continue;
    const int64_t n = p.value.numel();
    std::vector<int64_t> idx((size_t)n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(idx[(size_t)i], idx[(size_t)rng.uniform_int((uint64_t)i + 1)]);
    const int64_t want = std::min<int64_t>(n, opts.max_coords_per_param);

    GradCheckEntry entry{name, 0.0, 0, 0};
    int64_t cursor = 0;
    while (entry.coords_checked < want && cursor < n) {
      const int64_t i = idx[(size_t)cursor++];
      const double analytic = p.grad.at(i);

      auto probe = [&](double h, double& numeric) {
        const double orig = p.value.at(i);
        uint64_t sig_p = 0, sig_m = 0;
        p.value.at(i) = orig + h;
        const double fp = loss_fn(state, false, &sig_p);
        p.value.at(i) = orig - h;
        const double fm = loss_fn(state, false, &sig_m);
        p.value.at(i) = orig;
        numeric = (fp - fm) / (2.0 * h);
        return sig_p == sig_m;
      };
      auto rel_err = [&](double numeric) {
        return std::abs(analytic - numeric) /
               std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      };

      // The nominal step first; a coarser stencil beats accumulation noise on
      // small gradients, finer ones beat curvature.
      const double ladder[] = {opts.h, opts.h * 10.0, opts.h / 10.0, opts.h / 100.0};
      double rel = -1.0;
      for (double h : ladder) {
        double numeric = 0.0;
        if (!probe(h, numeric)) continue;  // stencil crossed a kink
        const double r = rel_err(numeric);
        rel = rel < 0.0 ? r : std::min(rel, r);
        if (rel < 2e-5) break;
      }
      if (rel < 0.0) {
        entry.coords_indeterminate += 1;
        continue;
      }
      entry.coords_checked += 1;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace curlip
