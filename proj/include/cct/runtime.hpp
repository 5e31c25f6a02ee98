#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cct {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS. Training allocates the same large buffers every step, and fresh
/// mmap'd pages cost a page fault each on first touch. Call once at startup.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

}  // namespace cct
