#ifndef MEDLORD_VOLUME_HPP
#define MEDLORD_VOLUME_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "medlord/rng.hpp"
#include "medlord/tensor.hpp"

namespace medlord {

struct IntensityWindow {
    float lo = 0.0f;
    float hi = 0.0f;
};

// 3D scalar grid, HU-like intensities. data dims are {Z, Y, X} so the flat
// payload is x-fastest. `window` is set once the volume has been normalized
// to [-1, 1]; denormalize requires it.
struct Volume {
    Tensor data; // dims {Z, Y, X}
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::optional<IntensityWindow> window;

    Volume() = default;
    Volume(int64_t nx, int64_t ny, int64_t nz) : data({nz, ny, nx}) {}

    int64_t nx() const { return data.dims[2]; }
    int64_t ny() const { return data.dims[1]; }
    int64_t nz() const { return data.dims[0]; }
    int64_t numel() const { return data.numel(); }

    float& at(int64_t x, int64_t y, int64_t z) { return data[(z * ny() + y) * nx() + x]; }
    float at(int64_t x, int64_t y, int64_t z) const { return data[(z * ny() + y) * nx() + x]; }

    std::array<int64_t, 3> shape() const { return {nx(), ny(), nz()}; }
};

// Integer region-id grid aligned with a Volume. 0 is background; every
// nonzero id present in data must appear in region_names.
struct LabelMap {
    std::array<int64_t, 3> dims_xyz{0, 0, 0};
    std::vector<uint16_t> data; // x-fastest
    std::map<uint16_t, std::string> region_names;

    LabelMap() = default;
    LabelMap(int64_t nx, int64_t ny, int64_t nz) : dims_xyz{nx, ny, nz} {
        data.assign(static_cast<size_t>(nx * ny * nz), 0);
    }

    int64_t nx() const { return dims_xyz[0]; }
    int64_t ny() const { return dims_xyz[1]; }
    int64_t nz() const { return dims_xyz[2]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    uint16_t& at(int64_t x, int64_t y, int64_t z) { return data[static_cast<size_t>((z * ny() + y) * nx() + x)]; }
    uint16_t at(int64_t x, int64_t y, int64_t z) const { return data[static_cast<size_t>((z * ny() + y) * nx() + x)]; }

    bool shape_matches(const Volume& v) const {
        return nx() == v.nx() && ny() == v.ny() && nz() == v.nz();
    }
};

// x -> 2*(clamp(x, lo, hi) - lo)/(hi - lo) - 1
inline Volume clip_and_normalize(const Volume& v, float lo, float hi) {
    require(lo < hi, ErrorKind::invalid_window, "clip_and_normalize: window lo >= hi");
    Volume out = v;
    const float span = hi - lo;
    for (auto& x : out.data.data) {
        float c = std::min(std::max(x, lo), hi);
        x = (c - lo) / span * 2.0f - 1.0f;
    }
    out.window = IntensityWindow{lo, hi};
    return out;
}

inline Volume denormalize(const Volume& v) {
    require(v.window.has_value(), ErrorKind::invalid_window, "denormalize: volume has no intensity window");
    const float lo = v.window->lo, hi = v.window->hi;
    Volume out = v;
    const float scale = (hi - lo) / 2.0f;
    for (auto& x : out.data.data) x = (x + 1.0f) * scale + lo;
    out.window.reset();
    return out;
}

// Center crop/pad to target shape. On odd differences the extra voxel is
// trimmed from (or padded onto) the high side.
inline Volume center_crop_or_pad(const Volume& v, std::array<int64_t, 3> target, float pad_value) {
    for (int a = 0; a < 3; ++a)
        require(target[a] > 0, ErrorKind::config, "center_crop_or_pad: target must be positive");

    Volume out(target[0], target[1], target[2]);
    out.spacing = v.spacing;
    out.window = v.window;
    out.data.fill(pad_value);

    const std::array<int64_t, 3> src = v.shape();
    // per axis: range copied from source and where it lands in the output
    std::array<int64_t, 3> s0{}, d0{}, n{};
    for (int a = 0; a < 3; ++a) {
        if (src[a] >= target[a]) {
            s0[a] = (src[a] - target[a]) / 2; // extra trimmed voxel goes high side
            d0[a] = 0;
            n[a] = target[a];
        } else {
            s0[a] = 0;
            d0[a] = (target[a] - src[a]) / 2; // extra pad voxel goes high side
            n[a] = src[a];
        }
    }
    for (int64_t z = 0; z < n[2]; ++z)
        for (int64_t y = 0; y < n[1]; ++y)
            for (int64_t x = 0; x < n[0]; ++x)
                out.at(d0[0] + x, d0[1] + y, d0[2] + z) = v.at(s0[0] + x, s0[1] + y, s0[2] + z);
    return out;
}

// Contiguous sub-volume with uniformly sampled start, deterministic in rng.
inline Volume random_patch(const Volume& v, std::array<int64_t, 3> patch, Rng& rng) {
    const auto src = v.shape();
    for (int a = 0; a < 3; ++a)
        require(patch[a] >= 1 && patch[a] <= src[a], ErrorKind::shape_mismatch,
                "random_patch: patch exceeds volume extent");
    std::array<int64_t, 3> start{};
    for (int a = 0; a < 3; ++a) start[a] = rng.uniform_int(0, src[a] - patch[a]);

    Volume out(patch[0], patch[1], patch[2]);
    out.spacing = v.spacing;
    out.window = v.window;
    for (int64_t z = 0; z < patch[2]; ++z)
        for (int64_t y = 0; y < patch[1]; ++y)
            for (int64_t x = 0; x < patch[0]; ++x)
                out.at(x, y, z) = v.at(start[0] + x, start[1] + y, start[2] + z);
    return out;
}

inline LabelMap crop_label(const LabelMap& lm, std::array<int64_t, 3> start, std::array<int64_t, 3> size) {
    LabelMap out(size[0], size[1], size[2]);
    out.region_names = lm.region_names;
    for (int64_t z = 0; z < size[2]; ++z)
        for (int64_t y = 0; y < size[1]; ++y)
            for (int64_t x = 0; x < size[0]; ++x)
                out.at(x, y, z) = lm.at(start[0] + x, start[1] + y, start[2] + z);
    return out;
}

} // namespace medlord

#endif
