#pragma once

// Randomized property checks for the heatmap merge and threshold rule.

#include <cmath>

#include "vpcsv/charmap.hpp"
#include "vpcsv/rng.hpp"

namespace vpcsv::testing {

inline cm::Heatmap random_heatmap(Rng& rng, int side) {
  cm::Heatmap h(side, side);
  // coarse values make exact ties common
  for (auto& v : h.values) v = rng.below(3) == 0 ? std::round(rng.uniform() * 4.0) / 4.0 : rng.uniform();
  return h;
}

struct PropertyTally {
  int cases = 0;
  int failures = 0;
};

/// Commutativity, associativity, idempotence and the zero identity.
inline PropertyTally check_merge_semilattice(int cases, std::uint64_t seed) {
  Rng rng(seed);
  PropertyTally t;
  for (int i = 0; i < cases; ++i) {
    const int side = 1 + static_cast<int>(rng.below(8));
    const auto a = random_heatmap(rng, side), b = random_heatmap(rng, side), c = random_heatmap(rng, side);
    const cm::Heatmap zero(side, side);
    using cm::merge_heatmaps;
    bool ok = merge_heatmaps({a, b}) == merge_heatmaps({b, a});
    ok = ok && merge_heatmaps({merge_heatmaps({a, b}), c}) == merge_heatmaps({a, merge_heatmaps({b, c})});
    ok = ok && merge_heatmaps({a, b, c}) == merge_heatmaps({a, merge_heatmaps({b, c})});
    ok = ok && merge_heatmaps({a, a}) == a;
    ok = ok && merge_heatmaps({a, zero}) == a && merge_heatmaps({a}) == a;
    ++t.cases;
    t.failures += !ok;
  }
  return t;
}

/// gamma1 <= gamma2 implies keep(gamma2) is a subset of keep(gamma1).
inline PropertyTally check_gamma_monotonicity(int cases, std::uint64_t seed) {
  Rng rng(seed);
  PropertyTally t;
  for (int i = 0; i < cases; ++i) {
    const int side = 1 + static_cast<int>(rng.below(8));
    const auto h = random_heatmap(rng, side);
    double g1 = rng.below(4) == 0 ? std::round(rng.uniform() * 4.0) / 4.0 : rng.uniform();
    double g2 = rng.below(4) == 0 ? std::round(rng.uniform() * 4.0) / 4.0 : rng.uniform();
    if (g1 > g2) std::swap(g1, g2);
    const auto k1 = cm::token_mask(h, g1), k2 = cm::token_mask(h, g2);
    bool ok = true;
    for (std::size_t k = 0; k < k1.keep.size(); ++k) ok = ok && (!k2.keep[k] || k1.keep[k]);
    ++t.cases;
    t.failures += !ok;
  }
  return t;
}

}  // namespace vpcsv::testing
