#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hvqa/data.hpp"

namespace hvqa::testing {

/// Second implementation of the answer logic. Reads the question as words, finds the
/// named object by color and answers from raw scene geometry.
inline std::optional<std::uint16_t> oracle_answer(const Scene& scene, const TokenSeq& tokens) {
  std::vector<std::string> words;
  for (auto t : tokens) {
    if (t >= question_vocab().size()) return std::nullopt;
    words.push_back(question_vocab()[t]);
  }
  auto has = [&](const char* w) { return std::find(words.begin(), words.end(), w) != words.end(); };

  const SceneObject* subject = nullptr;
  for (const auto& w : words)
    for (const auto& o : scene.objects)
      if (color_names()[o.color] == w) subject = &o;
  if (!subject) return std::nullopt;

  auto shape_word = [](const SceneObject& o) -> std::uint16_t { return o.shape == ShapeKind::kCircle ? 1 : 0; };

  if (has("how")) {
    int same = 0;
    for (const auto& o : scene.objects) same += o.shape == subject->shape;
    return static_cast<std::uint16_t>(3 + same);  // "1".."6" follow "yes" and "no"
  }
  if (has("closest") || has("farthest")) {
    const bool far = has("farthest");
    const SceneObject* best = nullptr;
    double best_d = 0.0;
    for (const auto& o : scene.objects) {
      if (&o == subject) continue;
      const double d = std::hypot(o.x - subject->x, o.y - subject->y);
      if (!best || (far ? d > best_d : d < best_d)) {
        best = &o;
        best_d = d;
      }
    }
    return shape_word(*best);
  }
  if (has("left")) return subject->x * static_cast<double>(scene.canvas) < static_cast<double>(scene.canvas) / 2 ? 2 : 3;
  if (has("shape")) return shape_word(*subject);
  return std::nullopt;
}

}  // namespace hvqa::testing
