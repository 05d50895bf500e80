#pragma once

namespace curvelang {

// Keeps freed training buffers in the heap instead of returning them to the
// OS after every step (glibc only; no-op elsewhere).
void configure_allocator();

// Loader thread cap from CURVELANG_THREADS, at least 1. `fallback` when unset
// or unparsable.
int loader_threads(int fallback = 1);

}  // namespace curvelang
