#pragma once

namespace mixsize {

// Smallest input side the three-stage network accepts: the two stride-2
// stages must leave at least one spatial pixel for global pooling.
inline constexpr int kMinInputSize = 8;

}  // namespace mixsize
