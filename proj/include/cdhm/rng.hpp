#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cdhm {

/// Derives a named sub-seed from a root seed. All randomness in a run flows
/// from one root seed expanded through this, so components can be tested for
/// determinism in isolation.
inline uint64_t derive_seed(uint64_t root, const std::string& name) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the stream name
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    uint64_t x = root ^ h;
    x += 0x9e3779b97f4a7c15ull;  // splitmix64 finalizer
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Seeded RNG with self-contained distributions. std:: distribution objects
/// are implementation-defined, so uniform/normal draws are spelled out here
/// to keep byte-level reproducibility under the determinism contracts.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return n ? engine_() % n : 0; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<double> normal_vec(int64_t n) {
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = normal();
        return v;
    }

    /// Engine + spare serialize to text so training can resume bit-exactly.
    std::string save_state() const {
        std::ostringstream os;
        os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> engine_ >> flag >> spare_;
        if (!is) throw std::runtime_error("Rng: bad serialized state");
        has_spare_ = flag != 0;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cdhm
