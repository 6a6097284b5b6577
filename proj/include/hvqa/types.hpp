#pragma once

#include <cstdint>
#include <vector>

namespace hvqa {

using Token = std::uint16_t;
using TokenSeq = std::vector<Token>;

enum class Mode { kTrain, kEval };

}  // namespace hvqa
