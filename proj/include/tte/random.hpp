#ifndef TTE_RANDOM_HPP
#define TTE_RANDOM_HPP

#include <array>
#include <cstdint>

// Counter-based random numbers (Philox4x32-10, Salmon et al. 2011).
// Every (stream, position) pair maps to the same output regardless of how
// many other streams have been consumed, which is what makes parallel
// replication reproducible: stream ids encode (replication, patient).

namespace tte {

struct PhiloxState {
    std::array<std::uint32_t, 4> counter{0, 0, 0, 0};
    std::array<std::uint32_t, 2> key{0, 0};
};

// One 10-round Philox4x32 block for the given counter/key.
std::array<std::uint32_t, 4> philox4x32(const std::array<std::uint32_t, 4>& counter,
                                        const std::array<std::uint32_t, 2>& key);

// Sequential draws from one substream. The 64-bit seed is the key; the
// stream id occupies the upper counter words, so each stream has 2^64
// positions of 4x32 bits.
class RngStream {
  public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id);

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    // uniform on (0,1), never exactly 0 or 1
    double next_double();
    // standard normal via inverse-cdf (single uniform per draw)
    double next_normal();
    bool next_bernoulli(double p);

  private:
    std::array<std::uint32_t, 4> counter_;
    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> block_{};
    int cursor_ = 4;  // forces a fresh block on first use
    void advance();
};

// Derives a child seed from (seed, index); used to give each replication
// its own 64-bit seed from one master seed.
std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index);

}  // namespace tte

#endif
