#include "hvqa/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hvqa/attention.hpp"
#include "hvqa/errors.hpp"

namespace hvqa {

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile: empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(values.size() - 1, lo + 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

TimingStats timing_stats(const std::vector<double>& samples_ms) {
  return {percentile(samples_ms, 0.5), percentile(samples_ms, 0.1), percentile(samples_ms, 0.9)};
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ArgumentError("spearman: need two equal-length samples of size >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::uint64_t predicted_flops(AggregatorKind kind, std::size_t k, const BenchOptions& o) {
  switch (kind) {
    case AggregatorKind::kSum: return static_cast<std::uint64_t>(k) * o.d;
    case AggregatorKind::kPairwise: return count_pair_flops(k, o.d, o.heads).flops();
    case AggregatorKind::kRelation:
      return count_relation_flops(k, o.d, o.d, o.rn_width, o.rn_layers, {}, o.rn_width).flops();
  }
  return 0;
}

std::vector<BenchRow> run_bench(const BenchOptions& o) {
  if (o.n == 0 || o.d == 0 || o.heads == 0 || o.reps == 0) throw ArgumentError("bench: n, d, heads and reps must be positive");
  for (auto k : o.k_list)
    if (k == 0 || k > o.n)
      throw ArgumentError("bench: k=" + std::to_string(k) + " outside [1, n=" + std::to_string(o.n) + "]");
  Rng rng(o.seed);
  Array<float> cells({o.n, o.d});
  for (auto& v : cells.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const Tensor<float> map(cells);
  const auto p = l2_norm_map(map);
  const Tensor<float> question(Array<float>({o.d}, 0.5f));

  std::vector<BenchRow> rows;
  for (auto kind : o.aggregators) {
    ParameterSet<float> params;
    NonlocalPairwise<float> pairwise;
    RelationNetwork<float> relation;
    if (kind == AggregatorKind::kPairwise) pairwise = NonlocalPairwise<float>(params, "pairwise", o.d, o.heads, 0, false, rng);
    if (kind == AggregatorKind::kRelation)
      relation = RelationNetwork<float>(params, "rn", o.d, o.d, o.rn_width, o.rn_layers, {}, o.rn_width, rng);
    auto aggregate = [&](const Tensor<float>& x) {
      switch (kind) {
        case AggregatorKind::kSum: return sum_pool(x);
        case AggregatorKind::kPairwise: return pairwise.forward(x);
        case AggregatorKind::kRelation: return relation.forward(x, question);
      }
      return x;
    };
    auto measure = [&](auto&& fn) {
      for (std::size_t i = 0; i < o.warmup; ++i) fn();
      std::vector<double> samples;
      for (std::size_t i = 0; i < o.reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        samples.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      }
      return timing_stats(samples);
    };
    for (auto k : o.k_list) {
      BenchRow row{to_string(kind), "han", k, o.n, o.d, o.heads, {}, predicted_flops(kind, k, o)};
      row.time = measure([&] { return aggregate(select_han(map, p, k).features); });
      rows.push_back(row);
    }
    BenchRow full{to_string(kind), "full", o.n, o.n, o.d, o.heads, {}, predicted_flops(kind, o.n, o)};
    full.time = measure([&] { return aggregate(map); });
    rows.push_back(full);
  }
  return rows;
}

double flop_time_correlation(const std::vector<BenchRow>& rows, const std::string& aggregator) {
  std::vector<double> flops, times;
  for (const auto& r : rows)
    if (r.aggregator == aggregator && r.variant == "han") {
      flops.push_back(static_cast<double>(r.predicted_flops));
      times.push_back(r.time.median_ms);
    }
  return spearman(flops, times);
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "aggregator,variant,k,n,d,heads,median_ms,p10_ms,p90_ms,predicted_flops\n";
  os.precision(6);
  for (const auto& r : rows)
    os << r.aggregator << "," << r.variant << "," << r.k << "," << r.n << "," << r.d << "," << r.heads << ","
       << r.time.median_ms << "," << r.time.p10_ms << "," << r.time.p90_ms << "," << r.predicted_flops << "\n";
  return os.str();
}

std::string bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "aggregator  variant   k    n   median_ms    p10_ms    p90_ms   predicted_flops\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-11s %-7s %3zu  %3zu  %10.3f %9.3f %9.3f   %15llu\n", r.aggregator.c_str(),
                  r.variant.c_str(), r.k, r.n, r.time.median_ms, r.time.p10_ms, r.time.p90_ms,
                  static_cast<unsigned long long>(r.predicted_flops));
    os << line;
  }
  std::vector<std::string> seen;
  for (const auto& r : rows)
    if (std::find(seen.begin(), seen.end(), r.aggregator) == seen.end()) seen.push_back(r.aggregator);
  for (const auto& a : seen) {
    std::size_t han_rows = 0;
    for (const auto& r : rows) han_rows += r.aggregator == a && r.variant == "han";
    if (han_rows >= 2) os << "spearman(flops, median) " << a << " = " << flop_time_correlation(rows, a) << "\n";
  }
  return os.str();
}

}  // namespace hvqa
