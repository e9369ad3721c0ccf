#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace kidforge {

// Every failure mode the library reports. Tests match on the kind, so new
// kinds are append-only.
enum class ErrorKind {
    parse,
    schema_violation,
    coverage,
    format,
    shape,
    empty_input,
    missing_class,
    no_source,
    protocol,
    config,
    codec,
    io,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::parse: return "parse";
        case ErrorKind::schema_violation: return "schema_violation";
        case ErrorKind::coverage: return "coverage";
        case ErrorKind::format: return "format";
        case ErrorKind::shape: return "shape";
        case ErrorKind::empty_input: return "empty_input";
        case ErrorKind::missing_class: return "missing_class";
        case ErrorKind::no_source: return "no_source";
        case ErrorKind::protocol: return "protocol";
        case ErrorKind::config: return "config";
        case ErrorKind::codec: return "codec";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

// FNV-1a, 64 bit. Used everywhere a stable, platform-independent hash is
// needed (split assignment, seed derivation, model versioning). Never change
// the constants: serialized artifacts depend on them.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t seed = 14695981039346656037ull) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t seed = 14695981039346656037ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

// splitmix64 finalizer; decorrelates FNV output before use as RNG material.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent sub-seed from a base seed plus a list of string
// tags. Sub-RNGs for different tasks (per-bag resampling, per-dataset shift,
// ...) must come from here so adding a consumer never shifts another one.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::string_view> tags) {
    std::uint64_t h = fnv1a64(&base, sizeof(base));
    for (auto t : tags) {
        h = fnv1a64(t, h);
        h = fnv1a64(std::string_view("\x1f", 1), h);  // separator so {"ab","c"} != {"a","bc"}
    }
    return mix64(h);
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::initializer_list<std::string_view> tags) {
    return std::mt19937_64(derive_seed(base, tags));
}

// Uniform value in [0, 1) from a hash. 53 bits of mantissa.
inline double unit_from_hash(std::uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// The std <random> distributions are implementation-defined, so drawing
// through them would make seeds non-portable across standard libraries.
// These three cover every draw the library needs.
inline double rand_unit(std::mt19937_64& rng) { return unit_from_hash(rng()); }

inline std::size_t rand_index(std::mt19937_64& rng, std::size_t n) {
    // Modulo bias is < 2^-40 for any n this library sees.
    return static_cast<std::size_t>(rng() % n);
}

inline double rand_normal(std::mt19937_64& rng) {
    // Box-Muller, cosine branch only.
    double u1 = 1.0 - rand_unit(rng);  // (0, 1]
    double u2 = rand_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
}

template <typename T>
inline void shuffle_indices(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rand_index(rng, i)]);
}

// Shortest round-trip decimal representation. All serialized doubles go
// through this so that re-serialization is byte identical.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        fail(ErrorKind::format, "bad numeric literal '" + std::string(s) + "'");
    return v;
}

inline long parse_long(std::string_view s) {
    long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        fail(ErrorKind::format, "bad integer literal '" + std::string(s) + "'");
    return v;
}

inline std::string_view trim(std::string_view s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

// Canonical label form: labels compare case-insensitively and ignore
// surrounding whitespace, so they are normalized once at parse time.
inline std::string normalize_label(std::string_view s) {
    return to_lower(trim(s));
}

enum class Split { train, val, test };

// Deterministic 80/10/10 split keyed on the sample id alone (plus the
// manifest's split seed). Independent of everything else, so the test split
// of a dataset is identical no matter which team or run touches it.
inline Split split_of(std::string_view sample_id, std::uint64_t split_seed) {
    std::uint64_t h = mix64(fnv1a64(sample_id, fnv1a64(&split_seed, sizeof(split_seed))));
    double u = unit_from_hash(h);
    if (u < 0.8) return Split::train;
    if (u < 0.9) return Split::val;
    return Split::test;
}

// Log levels, controlled by the KIDFORGE_LOG environment variable:
// quiet < info < debug. Default info.
inline int log_level() {
    static int level = [] {
        const char* env = std::getenv("KIDFORGE_LOG");
        if (!env) return 1;
        std::string v = to_lower(env);
        if (v == "quiet" || v == "0") return 0;
        if (v == "debug" || v == "2") return 2;
        return 1;
    }();
    return level;
}

}  // namespace kidforge
