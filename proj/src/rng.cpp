#include "akd/rng.hpp"

#include <cmath>
#include <sstream>

#include "akd/errors.hpp"

namespace akd {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    if (n == 0) throw ParamError("rng: uniform_index needs n > 0");
    // Rejection sampling for an unbiased draw.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    // u1 in (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor Rng::normal_tensor(const std::vector<Index>& shape) {
    Tensor t = Tensor::zeros(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = normal();
    return t;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(uniform_index(i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

Rng Rng::fork(std::uint64_t tag) const {
    // Child seed mixes the root seed with the finalized tag; both inputs go
    // through splitmix64 so nearby tags land far apart.
    return Rng(splitmix64(seed_ ^ splitmix64(tag ^ 0xA0761D6478BD642Full)));
}

Rng Rng::fork(std::string_view name) const { return fork(fnv1a(name)); }

std::string Rng::state_string() const {
    std::ostringstream os;
    os << seed_ << " ";
    os << engine_;
    return os.str();
}

void Rng::restore_state(const std::string& state) {
    std::istringstream is(state);
    is >> seed_;
    is >> engine_;
    if (is.fail()) throw FormatError("rng: malformed engine state");
}

}  // namespace akd
