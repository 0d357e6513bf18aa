#pragma once

#include <cstddef>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace smoothcert {

// Caps the number of worker threads used by internal loops.
inline void set_num_threads(int n) {
#if defined(_OPENMP)
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int num_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Static-schedule loop. Callers must make iterations write disjoint outputs;
// results are then independent of the thread count.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
#if defined(_OPENMP)
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (n > 1)
  for (long long i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

}  // namespace smoothcert
