#pragma once

// A two-class bundle on which exactly one beta2 of a grid classifies every
// image correctly (beta3 = 0, sharp alpha_s).
//
// Each image has three copies of u = (a, 0, 1, 0)/|.| and one pixel e1 for
// class 1 (e0 for class 0 in the mirrored layout). The plain cosine term
// favours the e1 class, the textual term the class u leans towards, so each
// image flips at its own beta2 threshold.

#include <vector>

#include "calip/feature_store.hpp"

namespace calip::testing {

inline MatF dominant_pixels(float a, bool mirrored) {
  MatF px = MatF::Zero(4, 4);
  const int lean = mirrored ? 1 : 0;
  const int other = mirrored ? 0 : 1;
  for (int r = 0; r < 3; ++r) {
    px(r, lean) = a;
    px(r, 2) = 1.0f;
  }
  px(3, other) = 1.0f;
  return px;
}

struct DominantCase {
  float a;
  bool mirrored;
  std::uint32_t label;  ///< the class the textual term favours, or the other one
};

/// Images labelled with the textual favourite need beta2 above their
/// threshold; the last one, labelled with the cosine favourite, needs beta2
/// below its threshold.
inline std::vector<DominantCase> dominant_cases() {
  return {{0.28f, false, 0}, {0.30f, false, 0}, {0.32f, true, 1}, {0.33f, true, 1}, {0.25f, false, 1}};
}

inline FeatureBundle dominant_bundle() {
  FeatureBundle b;
  b.class_names = {"left", "right"};
  b.text_features = MatF::Identity(2, 4);
  b.h = 4;
  b.w = 1;
  for (const auto& c : dominant_cases()) b.images.push_back({c.label, SpatialMap<float>(4, 1, dominant_pixels(c.a, c.mirrored))});
  return b;
}

}  // namespace calip::testing
