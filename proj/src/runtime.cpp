#include "curvelang/runtime.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace curvelang {

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

int loader_threads(int fallback) {
  const char* env = std::getenv("CURVELANG_THREADS");
  if (env == nullptr) return fallback;
  int value = 0;
  const auto [ptr, ec] = std::from_chars(env, env + std::strlen(env), value);
  if (ec != std::errc() || value < 1) return fallback;
  return value;
}

}  // namespace curvelang
