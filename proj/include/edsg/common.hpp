#pragma once

// Shared plumbing: error taxonomy, deterministic RNG helpers, small string
// and byte utilities used across the library.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace edsg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to a primitive's rule.
struct ShapeError : Error {
  using Error::Error;
};
// A tape operation referenced a node that is not on the tape.
struct TapeError : Error {
  using Error::Error;
};
// A precondition of an operation's contract was violated.
struct ContractError : Error {
  using Error::Error;
};
// A model or run configuration is invalid.
struct ConfigError : Error {
  using Error::Error;
};
// User-supplied data (tokens, sequences, files) is invalid.
struct InputError : Error {
  using Error::Error;
};
// A checkpoint transformation could not be mapped.
struct SurgeryError : Error {
  using Error::Error;
};
// A serialized file is malformed.
struct FormatError : Error {
  using Error::Error;
};
// A well-formed file failed semantic validation.
struct ValidationError : Error {
  using Error::Error;
};
// Training produced a non-finite value.
struct NumericsError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic seed derivation. All stochastic stages derive their engine
// seeds through splitmix64 so that results depend only on (seed, index).

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ (0xa076'1d64'78bd'642full * stream)) + index);
}

// FNV-1a over a string; used to give every named tensor its own seed stream
// independent of map iteration order.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::mt19937_64 make_engine(uint64_t seed) { return std::mt19937_64(seed); }

// Uniform double in [0,1) with a fixed, implementation-independent mapping.
inline double next_unit(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller (fixed algorithm, unlike std::normal_distribution).
class NormalSampler {
 public:
  explicit NormalSampler(uint64_t seed) : eng_(seed) {}
  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = next_unit(eng_);
    } while (u1 <= 1e-300);
    u2 = next_unit(eng_);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Small formatting helpers (std::format is unavailable on the supported
// toolchain baseline).

inline std::string cat() { return {}; }

template <typename T, typename... Rest>
std::string cat(const T& head, const Rest&... rest) {
  std::string out;
  if constexpr (std::is_same_v<T, std::string> || std::is_convertible_v<T, const char*>) {
    out = head;
  } else {
    out = std::to_string(head);
  }
  return out + cat(rest...);
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Little-endian binary stream helpers shared by the dataset and checkpoint
// file formats. Reads throw FormatError on a short stream so callers surface
// truncation instead of consuming garbage.

namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) {
    throw FormatError(cat("truncated stream while reading ", what));
  }
}

inline void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, 1); }
inline void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, 4); }
inline void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, 8); }
inline void write_i32(std::ostream& os, int32_t v) { write_bytes(os, &v, 4); }
inline void write_f32(std::ostream& os, float v) { write_bytes(os, &v, 4); }

inline uint8_t read_u8(std::istream& is, const char* what) {
  uint8_t v = 0;
  read_bytes(is, &v, 1, what);
  return v;
}
inline uint32_t read_u32(std::istream& is, const char* what) {
  uint32_t v = 0;
  read_bytes(is, &v, 4, what);
  return v;
}
inline uint64_t read_u64(std::istream& is, const char* what) {
  uint64_t v = 0;
  read_bytes(is, &v, 8, what);
  return v;
}
inline int32_t read_i32(std::istream& is, const char* what) {
  int32_t v = 0;
  read_bytes(is, &v, 4, what);
  return v;
}
inline float read_f32(std::istream& is, const char* what) {
  float v = 0.0f;
  read_bytes(is, &v, 4, what);
  return v;
}

}  // namespace io

}  // namespace edsg
