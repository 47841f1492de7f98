#ifndef MEDLORD_PHANTOM_HPP
#define MEDLORD_PHANTOM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "medlord/rng.hpp"
#include "medlord/volume.hpp"

namespace medlord {

struct RangeF {
    float lo = 0.0f;
    float hi = 0.0f;
    float draw(Rng& rng) const { return rng.uniform(lo, hi); }
    float mid() const { return 0.5f * (lo + hi); }
    bool overlaps(const RangeF& o) const { return lo <= o.hi && o.lo <= hi; }
};

enum class Primitive { ellipsoid, capsule };

struct RegionSpec {
    std::string name;
    Primitive primitive = Primitive::ellipsoid;
    std::array<RangeF, 3> center;  // voxel coords, per axis
    std::array<RangeF, 3> radius;  // per-axis radii; capsule uses radius[0]
    RangeF half_length{0, 0};      // capsule only
    RangeF intensity_hu;
};

// Procedural stand-in for patient anatomy: labeled primitives over a noisy
// background. Region intensity ranges must be pairwise disjoint and disjoint
// from the background range so intensity thresholding can recover the labels.
struct PhantomSpec {
    std::array<int64_t, 3> grid{64, 64, 32}; // X, Y, Z
    std::array<float, 3> spacing{1, 1, 1};
    RangeF background_hu{-80, -40};
    float background_noise_sd = 10.0f;
    std::vector<RegionSpec> regions;
    uint64_t seed = 0;

    void validate() const {
        for (int a = 0; a < 3; ++a)
            require(grid[a] > 0, ErrorKind::config, "PhantomSpec: grid dims must be positive");
        require(background_noise_sd >= 0, ErrorKind::config, "PhantomSpec: negative noise sd");
        require(regions.size() < 65535, ErrorKind::config, "PhantomSpec: too many regions");
        for (size_t i = 0; i < regions.size(); ++i) {
            require(regions[i].intensity_hu.lo < regions[i].intensity_hu.hi, ErrorKind::config,
                    "PhantomSpec: region '" + regions[i].name + "' has empty intensity range");
            require(!regions[i].intensity_hu.overlaps(background_hu), ErrorKind::config,
                    "PhantomSpec: region '" + regions[i].name + "' overlaps background intensities");
            for (size_t j = i + 1; j < regions.size(); ++j)
                require(!regions[i].intensity_hu.overlaps(regions[j].intensity_hu), ErrorKind::config,
                        "PhantomSpec: regions '" + regions[i].name + "' and '" + regions[j].name +
                            "' have overlapping intensity ranges");
        }
    }
};

namespace detail {

struct PlacedPrimitive {
    Primitive kind;
    std::array<float, 3> center;
    std::array<float, 3> radius;   // ellipsoid semi-axes; capsule: radius[0]
    std::array<float, 3> axis;     // capsule unit axis
    float half_length = 0;

    bool contains(float x, float y, float z) const {
        if (kind == Primitive::ellipsoid) {
            float dx = (x - center[0]) / radius[0];
            float dy = (y - center[1]) / radius[1];
            float dz = (z - center[2]) / radius[2];
            return dx * dx + dy * dy + dz * dz <= 1.0f;
        }
        // capsule: distance from point to the center segment
        float px = x - center[0], py = y - center[1], pz = z - center[2];
        float t = px * axis[0] + py * axis[1] + pz * axis[2];
        t = std::clamp(t, -half_length, half_length);
        float qx = px - t * axis[0], qy = py - t * axis[1], qz = pz - t * axis[2];
        return qx * qx + qy * qy + qz * qz <= radius[0] * radius[0];
    }

    // conservative axis-aligned extent, used for bounds checks and rasterization
    void bounds(std::array<float, 3>& lo, std::array<float, 3>& hi) const {
        for (int a = 0; a < 3; ++a) {
            float extent = (kind == Primitive::ellipsoid)
                               ? radius[a]
                               : std::fabs(axis[a]) * half_length + radius[0];
            lo[a] = center[a] - extent;
            hi[a] = center[a] + extent;
        }
    }
};

inline PlacedPrimitive draw_primitive(const RegionSpec& r, Rng& rng) {
    PlacedPrimitive p;
    p.kind = r.primitive;
    for (int a = 0; a < 3; ++a) p.center[a] = r.center[a].draw(rng);
    for (int a = 0; a < 3; ++a) p.radius[a] = r.radius[a].draw(rng);
    if (r.primitive == Primitive::capsule) {
        p.half_length = r.half_length.draw(rng);
        float n2;
        do {
            for (int a = 0; a < 3; ++a) p.axis[a] = rng.normal();
            n2 = p.axis[0] * p.axis[0] + p.axis[1] * p.axis[1] + p.axis[2] * p.axis[2];
        } while (n2 < 1e-6f);
        float inv = 1.0f / std::sqrt(n2);
        for (int a = 0; a < 3; ++a) p.axis[a] *= inv;
    }
    return p;
}

} // namespace detail

// Deterministic in spec.seed. Later regions overwrite earlier ones on overlap.
inline std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    Volume vol(spec.grid[0], spec.grid[1], spec.grid[2]);
    vol.spacing = spec.spacing;
    LabelMap lm(spec.grid[0], spec.grid[1], spec.grid[2]);

    const float bg_mean = spec.background_hu.mid();
    for (auto& v : vol.data.data) {
        float s = rng.normal(bg_mean, spec.background_noise_sd);
        v = std::clamp(s, spec.background_hu.lo, spec.background_hu.hi);
    }

    for (size_t ri = 0; ri < spec.regions.size(); ++ri) {
        const RegionSpec& r = spec.regions[ri];
        const uint16_t id = static_cast<uint16_t>(ri + 1);
        lm.region_names[id] = r.name;

        detail::PlacedPrimitive prim;
        bool placed = false;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            prim = detail::draw_primitive(r, rng);
            std::array<float, 3> lo, hi;
            prim.bounds(lo, hi);
            bool fits = true;
            for (int a = 0; a < 3; ++a)
                fits = fits && lo[a] >= 0.0f && hi[a] <= static_cast<float>(spec.grid[a] - 1);
            if (fits) {
                placed = true;
                break;
            }
        }
        if (!placed)
            fail(ErrorKind::generation_failure,
                 "generate_phantom: region '" + r.name + "' does not fit after 1000 attempts");

        std::array<float, 3> lo, hi;
        prim.bounds(lo, hi);
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(lo[0])));
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(lo[1])));
        const int64_t z0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(lo[2])));
        const int64_t x1 = std::min<int64_t>(spec.grid[0] - 1, static_cast<int64_t>(std::ceil(hi[0])));
        const int64_t y1 = std::min<int64_t>(spec.grid[1] - 1, static_cast<int64_t>(std::ceil(hi[1])));
        const int64_t z1 = std::min<int64_t>(spec.grid[2] - 1, static_cast<int64_t>(std::ceil(hi[2])));
        for (int64_t z = z0; z <= z1; ++z)
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x)
                    if (prim.contains(static_cast<float>(x), static_cast<float>(y), static_cast<float>(z))) {
                        vol.at(x, y, z) = r.intensity_hu.draw(rng);
                        lm.at(x, y, z) = id;
                    }
    }
    return {std::move(vol), std::move(lm)};
}

// Segmentation window per region: each intensity range widened to the
// midpoint of the gap toward its neighbors (half the lower gap above the
// top range). Windows are half-open [lo, hi): adjacent windows share an
// endpoint without overlapping. Output order matches spec.regions; ids are
// 1-based.
inline std::vector<std::pair<uint16_t, RangeF>> derive_threshold_windows(const PhantomSpec& spec) {
    struct Band {
        uint16_t id; // 0 = background
        RangeF hu;
    };
    std::vector<Band> bands;
    bands.push_back({0, spec.background_hu});
    for (size_t i = 0; i < spec.regions.size(); ++i)
        bands.push_back({static_cast<uint16_t>(i + 1), spec.regions[i].intensity_hu});
    std::sort(bands.begin(), bands.end(), [](const Band& a, const Band& b) { return a.hu.lo < b.hu.lo; });

    std::vector<std::pair<uint16_t, RangeF>> out(spec.regions.size());
    for (size_t i = 0; i < bands.size(); ++i) {
        if (bands[i].id == 0) continue;
        RangeF w;
        w.lo = (i == 0) ? bands[i].hu.lo - 0.5f * (bands[i].hu.hi - bands[i].hu.lo)
                        : 0.5f * (bands[i - 1].hu.hi + bands[i].hu.lo);
        if (i + 1 < bands.size()) {
            w.hi = 0.5f * (bands[i].hu.hi + bands[i + 1].hu.lo);
        } else {
            w.hi = bands[i].hu.hi + (bands[i].hu.lo - w.lo);
        }
        out[bands[i].id - 1] = {bands[i].id, w};
    }
    return out;
}

// Desk-scale default: a large soft-tissue body, a muscle-intensity shell with
// a bright chamber inside it, and a contrast-bright vessel. Intensity bands
// are well separated so threshold segmentation stays reliable on synthesis.
inline PhantomSpec default_phantom_spec(std::array<int64_t, 3> grid = {64, 64, 32}, uint64_t seed = 0) {
    auto fr = [&](float flo, float fhi, int axis) {
        return RangeF{flo * static_cast<float>(grid[axis]), fhi * static_cast<float>(grid[axis])};
    };
    PhantomSpec spec;
    spec.grid = grid;
    spec.seed = seed;
    spec.background_hu = {-80, -40};
    spec.background_noise_sd = 10.0f;

    RegionSpec body;
    body.name = "body";
    body.center = {fr(0.47f, 0.53f, 0), fr(0.47f, 0.53f, 1), fr(0.47f, 0.53f, 2)};
    body.radius = {fr(0.36f, 0.42f, 0), fr(0.36f, 0.42f, 1), fr(0.34f, 0.40f, 2)};
    body.intensity_hu = {20, 60};
    spec.regions.push_back(body);

    RegionSpec myo;
    myo.name = "myocardium";
    myo.center = {fr(0.40f, 0.56f, 0), fr(0.40f, 0.56f, 1), fr(0.42f, 0.56f, 2)};
    myo.radius = {fr(0.13f, 0.17f, 0), fr(0.13f, 0.17f, 1), fr(0.24f, 0.30f, 2)};
    myo.intensity_hu = {120, 160};
    spec.regions.push_back(myo);

    RegionSpec lv;
    lv.name = "lv";
    lv.center = {fr(0.43f, 0.53f, 0), fr(0.43f, 0.53f, 1), fr(0.44f, 0.54f, 2)};
    lv.radius = {fr(0.075f, 0.10f, 0), fr(0.075f, 0.10f, 1), fr(0.14f, 0.19f, 2)};
    lv.intensity_hu = {280, 320};
    spec.regions.push_back(lv);

    RegionSpec aorta;
    aorta.name = "aorta";
    aorta.primitive = Primitive::capsule;
    aorta.center = {fr(0.64f, 0.75f, 0), fr(0.38f, 0.60f, 1), fr(0.40f, 0.60f, 2)};
    aorta.radius = {RangeF{2.5f, 3.5f}, RangeF{2.5f, 3.5f}, RangeF{2.5f, 3.5f}};
    aorta.half_length = {6.0f, 9.0f};
    aorta.intensity_hu = {420, 460};
    spec.regions.push_back(aorta);

    return spec;
}

} // namespace medlord

#endif
