#pragma once

#if defined(__SSE__) || defined(_M_X64)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace phase {

/// Flushes subnormal floats to zero on the calling thread. Vanishing gradients
/// through long recurrences otherwise land in the subnormal range, which is
/// dramatically slower on x86.
inline void flush_denormals() {
#if defined(__SSE__) || defined(_M_X64)
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

}  // namespace phase
