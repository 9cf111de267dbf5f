#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace spc {

// Counter-based deterministic RNG.
//
// Every random decision in the library draws from a stream addressed by a
// list of integer words (seed, domain tag, image id, restart, step, ...).
// Streams are stateless functions of their address plus a local counter, so
// results never depend on evaluation order, thread count, or how many draws
// other components consumed.  The mixer is the splitmix64 finalizer.

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stream domain tags: keep values stable forever, they are part of the
// reproducibility contract baked into saved artifacts.
enum class StreamTag : std::uint64_t {
    kDictInit = 1,       // dictionary atom initialisation / dead-atom reseeding
    kDropout = 2,        // encoder code dropout masks
    kModelInit = 3,      // decoder / classifier weight initialisation
    kShuffle = 4,        // epoch shuffling of training data
    kAttackInit = 5,     // perturbation restarts (uniform init)
    kSynthData = 6,      // synthetic dataset generation
    kPatchSample = 7,    // sampling patches for dictionary learning
    kAugment = 8,        // training-time augmentation (flip / crop offsets)
};

class Rng {
  public:
    Rng() : key_(0) {}

    static constexpr std::uint64_t kBasis = 0x243f6a8885a308d3ULL;

    // One folding step of the stream-address hash.
    static std::uint64_t fold(std::uint64_t key, std::uint64_t word) {
        return splitmix64(key ^ (word + kGolden + (key << 6) + (key >> 2)));
    }

    static std::uint64_t fold_words(const std::uint64_t* words, std::size_t n,
                                    std::uint64_t key = kBasis) {
        for (std::size_t i = 0; i < n; ++i) key = fold(key, words[i]);
        return key;
    }

    static Rng from_key(std::uint64_t key) {
        Rng r;
        r.key_ = key;
        return r;
    }

    // Builds a stream key by folding the address words through the mixer.
    static Rng stream(std::initializer_list<std::uint64_t> words) {
        return from_key(fold_words(words.begin(), words.size()));
    }

    std::uint64_t next_u64() { return splitmix64(key_ + kGolden * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Standard normal via Box-Muller (both values used, one cached).
    double next_gaussian() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = next_unit();
        } while (u1 <= 0.0);
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // Unbiased integer in [0, n) by rejection sampling.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    bool bernoulli(double p) { return next_unit() < p; }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace spc
