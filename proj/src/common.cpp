#include "carfollow/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace carfollow {

void parallel_for(long n, bool parallel, const std::function<void(long)>& body) {
  if (!parallel) {
    for (long i = 0; i < n; ++i) body(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < n; ++i) body(i);
#else
  for (long i = 0; i < n; ++i) body(i);
#endif
}

}  // namespace carfollow
