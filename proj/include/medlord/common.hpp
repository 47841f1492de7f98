#ifndef MEDLORD_COMMON_HPP
#define MEDLORD_COMMON_HPP

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace medlord {

// Error taxonomy. The CLI maps kinds onto exit codes; tests assert on kinds
// directly so every failure mode stays distinguishable.
enum class ErrorKind {
    config,              // bad config / invalid argument
    invalid_window,      // lo >= hi or missing window metadata
    shape_mismatch,      // incompatible tensor/volume shapes
    malformed_header,    // .mvol header cannot be parsed
    truncated_payload,   // .mvol payload shorter than header promises
    payload_mismatch,    // .mvol payload size disagrees with header shape
    unknown_label,       // label id outside the declared region set
    overlapping_windows, // threshold windows are not pairwise disjoint
    generation_failure,  // phantom geometry rejected too many times
    dependency,          // missing or digest-mismatched upstream artifact
    nan_abort,           // training aborted on non-finite loss
    io,                  // filesystem / OS level failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

// FNV-1a 64-bit. Used for artifact digests and seed derivation; not
// cryptographic, just stable and cheap.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

} // namespace medlord

#endif
