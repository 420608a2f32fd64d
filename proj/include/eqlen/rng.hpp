#pragma once

/**
 * Counter-based splittable random streams.
 *
 * Every random draw in the library is a pure hash of
 * (seed, question_id, track_id, relaunch_count, counter), so a stream is
 * identified by its key alone and never perturbs—or is perturbed by—any
 * sibling stream. This is what makes rollouts bitwise reproducible and lets
 * independent subgroups run in any order (or concurrently) with identical
 * results: launching a new track mid-rollout opens a new key instead of
 * advancing a shared generator.
 */

#include <cstdint>

namespace eqlen::rng {

// ===== Mixing =====

/** 64-bit finalizer with full avalanche (splitmix64 increment + murmur-style mix). */
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/**
 * Fold `v` into running hash `h`. Chained applications are order-sensitive,
 * so key fields never collide by permutation. The combiner adds rather than
 * XORs the field hash: h ^ mix64(v) collapses to zero whenever a field
 * repeats the running hash's preimage (e.g. a key whose second field equals
 * its first), and addition has no such systematic fixed point.
 */
inline std::uint64_t mix_in(std::uint64_t h, std::uint64_t v) {
  return mix64(h + mix64(v));
}

// ===== Streams =====

/**
 * One independent random stream.
 *
 * The key is (seed, question_id, track_id, relaunch_count); `counter` is the
 * position within the stream. Copying a Stream copies its position; two
 * Streams with equal keys produce identical sequences.
 */
struct Stream {
  std::uint64_t seed = 0;
  std::int64_t question_id = 0;
  std::int64_t track_id = 0;
  std::int64_t relaunch_count = 0;
  std::uint64_t counter = 0;

  /** Next raw 64-bit draw; advances the counter. */
  std::uint64_t next_u64() {
    std::uint64_t h = mix64(seed);
    h = mix_in(h, static_cast<std::uint64_t>(question_id));
    h = mix_in(h, static_cast<std::uint64_t>(track_id));
    h = mix_in(h, static_cast<std::uint64_t>(relaunch_count));
    h = mix_in(h, counter++);
    return h;
  }

  /** Uniform double in [0, 1) with 53 random bits. */
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /** Uniform integer in [0, n). Requires n > 0. */
  std::int64_t next_below(std::int64_t n) {
    return static_cast<std::int64_t>(next_unit() * static_cast<double>(n));
  }
};

/** Stream for per-question work (rollouts): key carries the question and track identity. */
inline Stream track_stream(std::uint64_t seed, std::int64_t question_id,
                           std::int64_t track_id, std::int64_t relaunch_count) {
  return Stream{seed, question_id, track_id, relaunch_count, 0};
}

/** Derive a fresh seed for an inner scope (e.g. per training step) without reusing streams. */
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix_in(mix64(seed), salt);
}

}  // namespace eqlen::rng
