#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hvqa/aggregation.hpp"

namespace hvqa {

struct TimingStats {
  double median_ms = 0.0, p10_ms = 0.0, p90_ms = 0.0;
};

/// Linear-interpolated percentiles of a sample (q in [0,1]).
double percentile(std::vector<double> values, double q);
TimingStats timing_stats(const std::vector<double>& samples_ms);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct BenchOptions {
  std::vector<std::size_t> k_list{8, 16, 32, 64};
  std::size_t n = 64;
  std::size_t d = 512;
  std::size_t heads = 2;
  std::size_t reps = 30;
  std::size_t warmup = 3;
  std::vector<AggregatorKind> aggregators{AggregatorKind::kSum, AggregatorKind::kPairwise, AggregatorKind::kRelation};
  std::size_t rn_width = 256;
  std::size_t rn_layers = 4;
  std::uint64_t seed = 7;
};

struct BenchRow {
  std::string aggregator;
  std::string variant;  // "han" (top-k + gather + aggregate) or "full" (aggregate all n cells directly)
  std::size_t k = 0, n = 0, d = 0, heads = 0;
  TimingStats time;
  std::uint64_t predicted_flops = 0;
};

/// Times selection plus aggregation for every aggregator and k, and a "full" row per
/// aggregator that aggregates all n cells without selection.
std::vector<BenchRow> run_bench(const BenchOptions& options);

/// Spearman correlation of predicted FLOPs and median time over the "han" rows of one aggregator.
double flop_time_correlation(const std::vector<BenchRow>& rows, const std::string& aggregator);

std::string bench_csv(const std::vector<BenchRow>& rows);
std::string bench_table(const std::vector<BenchRow>& rows);

/// Predicted FLOPs of one aggregator on k cells.
std::uint64_t predicted_flops(AggregatorKind kind, std::size_t k, const BenchOptions& options);

}  // namespace hvqa
