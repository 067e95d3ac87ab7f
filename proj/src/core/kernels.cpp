#include "nrf/kernels.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cstdlib>
#include <string>

namespace nrf::kernels {
namespace {

Isa detect() {
  Isa isa = isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
  if (const char* env = std::getenv("NRF_ISA")) {
    const std::string want(env);
    if (want == "scalar") {
      isa = Isa::scalar;
    } else if (want == "avx2") {
      if (isa_supported(Isa::avx2)) {
        isa = Isa::avx2;
      } else {
        spdlog::warn("NRF_ISA=avx2 requested but the CPU lacks AVX2/FMA; using scalar kernels");
      }
    } else {
      spdlog::warn("ignoring unknown NRF_ISA value '{}'", want);
    }
  }
  return isa;
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{nullptr};
  return current;
}

const KernelTable& table_for(Isa isa) {
#if defined(NRF_HAVE_AVX2_KERNELS)
  if (isa == Isa::avx2) return avx2::table();
#endif
  (void)isa;
  return scalar::table();
}

}  // namespace

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(NRF_HAVE_AVX2_KERNELS) && (defined(__x86_64__) || defined(__i386__))
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& active() {
  const KernelTable* t = slot().load(std::memory_order_acquire);
  if (t == nullptr) {
    t = &table_for(detect());
    slot().store(t, std::memory_order_release);
  }
  return *t;
}

Isa active_isa() { return active().isa; }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) isa = Isa::scalar;
  slot().store(&table_for(isa), std::memory_order_release);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace nrf::kernels
