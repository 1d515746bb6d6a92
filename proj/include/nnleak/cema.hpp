#pragma once

// Correlation analysis: Pearson coefficient between Hamming-weight
// predictions and trace samples, best-N hypothesis ranking, and the
// monotonic sample window used when values leak one after another.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nnleak/error.hpp"
#include "nnleak/float_codec.hpp"
#include "nnleak/trace_set.hpp"

namespace nnleak {

// Standard Pearson coefficient of `h` against every sample of `window`.
// Constant sample columns give r = 0.
inline std::vector<double> pearson_column(std::span<const double> h, const TraceSet& ts, SampleRange window) {
  const std::size_t n = ts.n_traces();
  if (h.size() != n) throw DimensionError("pearson_column: hypothesis length differs from trace count");
  if (n < 3) throw DegenerateError("pearson_column: need at least 3 traces");
  if (window.empty() || window.end > ts.n_samples()) throw DimensionError("pearson_column: bad window");
  double mh = 0.0;
  for (double v : h) mh += v;
  mh /= double(n);
  std::vector<double> hc(n);
  double shh = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    hc[i] = h[i] - mh;
    shh += hc[i] * hc[i];
  }
  if (shh == 0.0) throw DegenerateError("pearson_column: constant hypothesis vector");
  std::vector<double> r(window.size(), 0.0);
  for (std::size_t s = window.begin; s < window.end; ++s) {
    double mt = 0.0;
    for (std::size_t i = 0; i < n; ++i) mt += ts.sample(i, s);
    mt /= double(n);
    double stt = 0.0, sht = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double tc = ts.sample(i, s) - mt;
      stt += tc * tc;
      sht += hc[i] * tc;
    }
    r[s - window.begin] = stt == 0.0 ? 0.0 : sht / std::sqrt(shh * stt);
  }
  return r;
}

// Mean-centered copies of the trace columns in a window, reused across every
// hypothesis of a ranking pass.
class TraceColumns {
 public:
  TraceColumns(const TraceSet& ts, SampleRange window) : n_(ts.n_traces()), window_(window) {
    if (window.empty() || window.end > ts.n_samples()) throw DimensionError("trace window outside the trace");
    const std::size_t w = window.size();
    centered_.resize(w * n_);
    norm2_.assign(w, 0.0);
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t s = window.begin + c;
      double mean = 0.0;
      for (std::size_t i = 0; i < n_; ++i) mean += ts.sample(i, s);
      mean /= double(n_);
      double* col = centered_.data() + c * n_;
      for (std::size_t i = 0; i < n_; ++i) {
        col[i] = ts.sample(i, s) - mean;
        norm2_[c] += col[i] * col[i];
      }
    }
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t width() const noexcept { return window_.size(); }
  const SampleRange& window() const noexcept { return window_; }
  const double* column(std::size_t c) const noexcept { return centered_.data() + c * n_; }
  double norm2(std::size_t c) const noexcept { return norm2_[c]; }

 private:
  std::size_t n_;
  SampleRange window_;
  std::vector<double> centered_;
  std::vector<double> norm2_;
};

struct CorrEntry {
  float value = 0.0f;
  double r = 0.0;  // signed; ranking uses |r|
  std::size_t sample = 0;

  double abs_r() const noexcept { return std::abs(r); }
};

// Ranking order: larger |r|, then smaller hypothesis, then earlier sample.
inline bool ranks_before(const CorrEntry& a, const CorrEntry& b) noexcept {
  const double ra = a.abs_r(), rb = b.abs_r();
  if (ra != rb) return ra > rb;
  if (a.value != b.value) return a.value < b.value;
  return a.sample < b.sample;
}

struct CorrelationResult {
  std::vector<CorrEntry> ranked;  // best first, at most keep_n entries
  std::size_t evaluated = 0;
  std::size_t skipped_constant = 0;  // hypotheses whose prediction never varies
};

// ---------------------------------------------------------------------------
// Predictors: fill `out[i]` with the intermediate value a hypothesis implies
// for trace i.

// h * x_i
struct ProductPredictor {
  std::span<const float> x;
  void operator()(float h, std::span<float> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = h * x[i];
  }
};

namespace detail {

// Spacing of single-precision values around |v| (0 for zero).
inline double float_ulp(float v) noexcept {
  const std::uint32_t e = exponent_field(v);
  return e == 0 ? 0.0 : std::ldexp(1.0, static_cast<int>(e) - 150);
}

// Largest |addend| guaranteed to vanish when added to every base value:
// a quarter of the smallest spacing, so rounding always returns the base.
inline double absorb_limit(std::span<const float> base, double addend_scale) {
  if (base.empty() || !(addend_scale > 0.0)) return 0.0;
  double min_ulp = std::numeric_limits<double>::infinity();
  for (float b : base) min_ulp = std::min(min_ulp, float_ulp(b));
  return 0.25 * min_ulp / addend_scale;
}

}  // namespace detail

// prefix_i + h * x_i, the accumulator after one more multiply-add.
struct AccumulatePredictor {
  std::span<const float> prefix;
  std::span<const float> x;
  void operator()(float h, std::span<float> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float prod = h * x[i];
      out[i] = prefix[i] + prod;
    }
  }
  // |h| below this leaves every accumulator unchanged.
  double absorb_limit() const {
    double xmax = 0.0;
    for (float v : x) xmax = std::max(xmax, double(std::abs(v)));
    return detail::absorb_limit(prefix, xmax * (1.0 + 1e-6));
  }
};

// base_i + h, the accumulator after adding a constant.
struct OffsetPredictor {
  std::span<const float> base;
  void operator()(float h, std::span<float> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = base[i] + h;
  }
  double absorb_limit() const { return detail::absorb_limit(base, 1.0); }
};

// Arbitrary per-trace prediction, for callers outside the hot paths.
struct FunctionPredictor {
  std::function<float(float, std::size_t)> fn;
  void operator()(float h, std::span<float> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(h, i);
  }
};

namespace detail {

inline constexpr std::size_t kLanes = 8;

// Dot product of integer weights with a centered column. Eight independent
// partial sums in a fixed order, so the result does not depend on whether
// the compiler vectorizes the loop.
inline double lane_dot(const std::int32_t* hw, const double* col, std::size_t n) {
  double part[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t k = 0; k < kLanes; ++k) part[k] += double(hw[i + k]) * col[i + k];
  for (std::size_t k = 0; i < n; ++i, ++k) part[k] += double(hw[i]) * col[i];
  double s = 0.0;
  for (double p : part) s += p;
  return s;
}

struct Scratch {
  std::vector<float> pred;
  std::vector<std::int32_t> hw;
  explicit Scratch(std::size_t n) : pred(n), hw(n) {}
};

// Best sample of one prediction vector. Returns false when the Hamming-weight
// vector is constant.
inline bool score_prediction(Scratch& sc, const TraceColumns& cols, CorrEntry& best, double* peaks = nullptr) {
  const std::size_t n = cols.n();
  std::int64_t s = 0, s2 = 0;
  // 32-bit partial sums stay exact for blocks of 2^20 traces (32^2 * 2^20 = 2^30).
  constexpr std::size_t kBlock = std::size_t{1} << 20;
  for (std::size_t lo = 0; lo < n; lo += kBlock) {
    const std::size_t hi = std::min(n, lo + kBlock);
    std::int32_t bs = 0, bs2 = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::int32_t h = std::popcount(std::bit_cast<std::uint32_t>(sc.pred[i]));
      sc.hw[i] = h;
      bs += h;
      bs2 += h * h;
    }
    s += bs;
    s2 += bs2;
  }
  const std::int64_t num = static_cast<std::int64_t>(n) * s2 - s * s;  // n * sum((h - mean)^2), exact
  if (num == 0) return false;
  const double shh = double(num) / double(n);
  bool have = false;
  for (std::size_t c = 0; c < cols.width(); ++c) {
    const double ss = cols.norm2(c);
    const double r = ss == 0.0 ? 0.0 : lane_dot(sc.hw.data(), cols.column(c), n) / std::sqrt(shh * ss);
    if (peaks) peaks[c] = std::max(peaks[c], std::abs(r));
    const CorrEntry e{best.value, r, cols.window().begin + c};
    if (!have || ranks_before(e, best)) {
      best = e;
      have = true;
    }
  }
  return true;
}

}  // namespace detail

// Correlation of one prediction vector against every window sample; the
// entry with the largest |r| (earliest sample on ties). Constant predictions
// give r = 0 at the window start.
inline CorrEntry best_sample(std::span<const float> prediction, const TraceColumns& cols) {
  detail::Scratch sc(cols.n());
  std::copy(prediction.begin(), prediction.end(), sc.pred.begin());
  CorrEntry e{0.0f, 0.0, cols.window().begin};
  if (!detail::score_prediction(sc, cols, e)) return {0.0f, 0.0, cols.window().begin};
  return e;
}

// Scores every hypothesis by its best |r| over the window and keeps the
// `keep_n` best. With `all` non-null, every scored hypothesis is appended in
// hypothesis order. With `peaks` non-null, it receives the largest |r| of
// any hypothesis at each window sample. Hypotheses are split into contiguous
// blocks across `jobs` threads; the merge is order-independent.
template <class Predict>
CorrelationResult cema_rank(std::span<const float> hypotheses, const Predict& predict, const TraceColumns& cols,
                            std::size_t keep_n, int jobs = 1, std::vector<CorrEntry>* all = nullptr,
                            std::vector<double>* peaks = nullptr) {
  if (keep_n < 1) throw ConfigError("keep_n", "must be >= 1");
  if (cols.n() < 3) throw DegenerateError("cema_rank: need at least 3 traces");
  const std::size_t nh = hypotheses.size();
  std::vector<CorrEntry> scores(nh);
  std::vector<char> valid(nh, 0);

  // Hypotheses small enough to be absorbed by the accumulator all predict
  // the same vector; score it once.
  double limit = 0.0;
  if constexpr (requires { predict.absorb_limit(); }) limit = predict.absorb_limit();
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(nh / 256, 1));
  std::vector<std::vector<double>> part_peaks(peaks ? workers + 1 : 0, std::vector<double>(cols.width(), 0.0));
  CorrEntry absorbed{0.0f, 0.0, cols.window().begin};
  bool absorbed_valid = false;
  if (limit > 0.0) {
    detail::Scratch sc(cols.n());
    predict(0.0f, std::span<float>(sc.pred));
    absorbed_valid = detail::score_prediction(sc, cols, absorbed, peaks ? part_peaks[workers].data() : nullptr);
  }

  auto work = [&](std::size_t lo, std::size_t hi, std::size_t w) {
    detail::Scratch sc(cols.n());
    double* pk = peaks ? part_peaks[w].data() : nullptr;
    for (std::size_t k = lo; k < hi; ++k) {
      if (std::abs(double(hypotheses[k])) < limit) {
        scores[k] = {hypotheses[k], absorbed.r, absorbed.sample};
        valid[k] = absorbed_valid;
        continue;
      }
      predict(hypotheses[k], std::span<float>(sc.pred));
      CorrEntry e{hypotheses[k], 0.0, cols.window().begin};
      if (detail::score_prediction(sc, cols, e, pk)) {
        scores[k] = e;
        valid[k] = 1;
      }
    }
  };
  if (workers <= 1) {
    work(0, nh, 0);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (nh + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(nh, lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi, w);
    }
    for (auto& t : pool) t.join();
  }
  if (peaks) {
    peaks->assign(cols.width(), 0.0);
    for (const auto& pp : part_peaks)
      for (std::size_t c = 0; c < pp.size(); ++c) (*peaks)[c] = std::max((*peaks)[c], pp[c]);
  }

  CorrelationResult res;
  res.evaluated = nh;
  res.ranked.reserve(nh);
  for (std::size_t k = 0; k < nh; ++k) {
    if (valid[k])
      res.ranked.push_back(scores[k]);
    else
      ++res.skipped_constant;
    if (all && valid[k]) all->push_back(scores[k]);
  }
  const std::size_t keep = std::min(keep_n, res.ranked.size());
  std::partial_sort(res.ranked.begin(), res.ranked.begin() + static_cast<std::ptrdiff_t>(keep), res.ranked.end(),
                    ranks_before);
  res.ranked.resize(keep);
  return res;
}

// Samples strictly after the previous leak: (previous, T). previous = -1
// means nothing has been placed yet.
inline SampleRange monotonic_window(std::ptrdiff_t previous_leak_sample, std::size_t n_samples) {
  if (previous_leak_sample < -1) throw DimensionError("monotonic_window: previous sample below -1");
  const auto next = static_cast<std::size_t>(previous_leak_sample + 1);
  if (next >= n_samples)
    throw WindowExhaustedError("monotonic window exhausted: previous leak at sample " +
                               std::to_string(previous_leak_sample) + " of " + std::to_string(n_samples));
  return {next, n_samples};
}

}  // namespace nnleak
