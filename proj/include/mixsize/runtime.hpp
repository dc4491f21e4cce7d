#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mixsize {

/// Keeps freed activation buffers in the heap instead of returning them to the
/// OS after every op. Training allocates and frees the same large blocks each
/// step; with glibc defaults each reallocation page-faults its memory back in.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace mixsize
