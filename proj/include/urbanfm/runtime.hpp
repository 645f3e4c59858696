#pragma once

#include <cstdlib>

#include <unistd.h>

namespace urbanfm {

// Re-exec the current binary once with a tuned process environment.
//
// - OPENBLAS_CORETYPE: some virtualized CPUs report a model id the BLAS
//   dispatcher does not recognize, so it silently falls back to pre-AVX
//   kernels (~3x slower GEMM). When the ISA advertises AVX-512, pin the
//   matching kernel set. This must be in place before the BLAS library
//   initializes (which happens at load time), hence the re-exec.
// - glibc malloc: training allocates and frees large activation buffers every
//   batch; by default those round-trip through mmap/munmap and system time
//   dominates. Keep freed blocks on the heap instead.
//
// Call first thing in main(). Existing environment values are respected, and
// a sentinel prevents more than one exec. If exec fails we simply run untuned.
inline void tune_process_for_compute(char** argv) {
    if (std::getenv("URBANFM_TUNED")) return;
    setenv("URBANFM_TUNED", "1", 1);
    setenv("MALLOC_MMAP_MAX_", "0", 0);
    setenv("MALLOC_TRIM_THRESHOLD_", "1073741824", 0);
#if defined(__x86_64__)
    if (!std::getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
#endif
    execv("/proc/self/exe", argv);
}

}  // namespace urbanfm
