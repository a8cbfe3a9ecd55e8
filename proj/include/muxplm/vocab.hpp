#pragma once

#include <cstddef>
#include <cstdint>

namespace muxplm::vocab {

// Byte-level vocabulary: ids 0..255 are raw bytes, specials follow.
inline constexpr std::int32_t kByteCount = 256;
inline constexpr std::int32_t kPad = 256;
inline constexpr std::int32_t kCls = 257;
inline constexpr std::int32_t kMask = 258;
inline constexpr std::int32_t kEpsilonPad = 259;
inline constexpr std::int32_t kEpsilonBase = 260;
inline constexpr std::size_t kMaxMuxWidth = 16;
inline constexpr std::size_t kSize = static_cast<std::size_t>(kEpsilonBase) + kMaxMuxWidth;

constexpr std::int32_t epsilon(std::size_t instance) {
  return kEpsilonBase + static_cast<std::int32_t>(instance);
}

constexpr bool is_special(std::int32_t id) { return id >= kByteCount; }

}  // namespace muxplm::vocab
