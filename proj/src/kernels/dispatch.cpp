#include <atomic>
#include <cstdlib>
#include <string>

#include "dehaze/error.hpp"
#include "dehaze/kernels.hpp"

namespace dehaze::kernels {

#ifndef DEHAZE_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(DEHAZE_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa detect() {
    if (const char* env = std::getenv("DEHAZE_KERNELS")) {
        const std::string want(env);
        if (want == "scalar") return Isa::scalar;
        if (want == "avx2" && available(Isa::avx2)) return Isa::avx2;
    }
    return available(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

std::atomic<int>& current() {
    static std::atomic<int> isa{static_cast<int>(detect())};
    return isa;
}

}  // namespace

bool available(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
            return avx2_table() != nullptr && cpu_has_avx2();
    }
    return false;
}

void select(Isa isa) {
    if (!available(isa)) {
        throw ConfigError("kernel variant '" + std::string(name(isa)) + "' is not available on this host");
    }
    current().store(static_cast<int>(isa));
}

Isa selected() { return static_cast<Isa>(current().load()); }

const KernelTable& active() {
    return selected() == Isa::avx2 ? *avx2_table() : scalar_table();
}

std::string_view name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace dehaze::kernels
