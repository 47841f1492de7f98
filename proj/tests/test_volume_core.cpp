#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "medlord/mvol_io.hpp"
#include "medlord/phantom.hpp"
#include "medlord/volume.hpp"

using namespace medlord;
namespace fs = std::filesystem;

namespace {

Volume random_volume(int64_t nx, int64_t ny, int64_t nz, uint64_t seed, float lo, float hi) {
    Rng rng(seed);
    Volume v(nx, ny, nz);
    for (auto& x : v.data.data) x = rng.uniform(lo, hi);
    return v;
}

fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "medlord_volume_test";
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("clip_and_normalize maps window endpoints and midpoint") {
    Volume v(3, 1, 1);
    v.at(0, 0, 0) = -1000.0f;
    v.at(1, 0, 0) = 2000.0f;
    v.at(2, 0, 0) = 500.0f;
    Volume n = clip_and_normalize(v, -1000.0f, 2000.0f);
    CHECK(n.at(0, 0, 0) == -1.0f);
    CHECK(n.at(1, 0, 0) == 1.0f);
    CHECK(n.at(2, 0, 0) == 0.0f);
    REQUIRE(n.window.has_value());
    CHECK(n.window->lo == -1000.0f);
    CHECK(n.window->hi == 2000.0f);

    CHECK_THROWS_MATCHES(clip_and_normalize(v, 5.0f, 5.0f), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::invalid_window;
                         }));
}

TEST_CASE("clip_and_normalize clamps and stays monotone in [-1,1]") {
    Volume v = random_volume(16, 8, 4, 7, -2000.0f, 3000.0f);
    Volume n = clip_and_normalize(v, -1000.0f, 2000.0f);
    for (int64_t i = 0; i < n.numel(); ++i) {
        CHECK(n.data[i] >= -1.0f);
        CHECK(n.data[i] <= 1.0f);
    }
    // monotone: sort inputs, mapped outputs must be non-decreasing
    auto inputs = v.data.data;
    std::sort(inputs.begin(), inputs.end());
    float prev = -2.0f;
    for (float x : inputs) {
        float c = std::clamp(x, -1000.0f, 2000.0f);
        float y = 2.0f * (c + 1000.0f) / 3000.0f - 1.0f;
        CHECK(y >= prev);
        prev = y;
    }
}

TEST_CASE("denormalize inverts normalization") {
    Volume v(2, 1, 1);
    v.at(0, 0, 0) = 0.0f;
    v.at(1, 0, 0) = 1.0f;
    v.window = IntensityWindow{-1000.0f, 2000.0f};
    Volume d = denormalize(v);
    CHECK(d.at(0, 0, 0) == Catch::Approx(500.0).margin(1e-3));
    CHECK(d.at(1, 0, 0) == Catch::Approx(2000.0).margin(1e-3));

    // round trip on random in-window data
    Volume raw = random_volume(8, 8, 8, 11, -1000.0f, 2000.0f);
    Volume n = clip_and_normalize(raw, -1000.0f, 2000.0f);
    Volume back = denormalize(n);
    for (int64_t i = 0; i < raw.numel(); ++i)
        CHECK(std::fabs(back.data[i] - raw.data[i]) < 1e-5f * 3000.0f);

    Volume no_window(2, 2, 2);
    CHECK_THROWS_MATCHES(denormalize(no_window), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::invalid_window;
                         }));
}

TEST_CASE("center_crop_or_pad identity, crop oracle, pad border") {
    Volume v = random_volume(10, 10, 10, 3, -1.0f, 1.0f);
    Volume same = center_crop_or_pad(v, {10, 10, 10}, 0.0f);
    CHECK(tensor_max_abs_diff(same.data, v.data) == 0.0f);

    // 12 -> 10: index-arithmetic oracle, voxels [1..10] kept per axis
    Volume big = random_volume(12, 12, 12, 4, -1.0f, 1.0f);
    Volume cropped = center_crop_or_pad(big, {10, 10, 10}, 0.0f);
    for (int64_t z = 0; z < 10; ++z)
        for (int64_t y = 0; y < 10; ++y)
            for (int64_t x = 0; x < 10; ++x)
                CHECK(cropped.at(x, y, z) == big.at(x + 1, y + 1, z + 1));

    // odd difference 13 -> 10: low side trims floor(3/2)=1, high side 2
    Volume odd = random_volume(13, 13, 13, 5, -1.0f, 1.0f);
    Volume ocr = center_crop_or_pad(odd, {10, 10, 10}, 0.0f);
    CHECK(ocr.at(0, 0, 0) == odd.at(1, 1, 1));
    CHECK(ocr.at(9, 9, 9) == odd.at(10, 10, 10));

    // 8 -> 10 pad: one-voxel border of pad value on every side
    Volume small = random_volume(8, 8, 8, 6, -1.0f, 1.0f);
    Volume padded = center_crop_or_pad(small, {10, 10, 10}, -1.0f);
    for (int64_t z = 0; z < 10; ++z)
        for (int64_t y = 0; y < 10; ++y)
            for (int64_t x = 0; x < 10; ++x) {
                bool border = x == 0 || x == 9 || y == 0 || y == 9 || z == 0 || z == 9;
                if (border)
                    CHECK(padded.at(x, y, z) == -1.0f);
                else
                    CHECK(padded.at(x, y, z) == small.at(x - 1, y - 1, z - 1));
            }
}

TEST_CASE("crop of pad restores centered content") {
    Volume v = random_volume(9, 7, 5, 21, -1.0f, 1.0f);
    Volume padded = center_crop_or_pad(v, {15, 13, 11}, 0.5f);
    Volume back = center_crop_or_pad(padded, {9, 7, 5}, 0.0f);
    CHECK(tensor_max_abs_diff(back.data, v.data) == 0.0f);
}

TEST_CASE("random_patch whole-volume, determinism, uniform starts") {
    Volume v = random_volume(8, 8, 8, 9, -1.0f, 1.0f);
    {
        Rng rng(1);
        Volume whole = random_patch(v, {8, 8, 8}, rng);
        CHECK(tensor_max_abs_diff(whole.data, v.data) == 0.0f);
    }
    {
        Rng a(42), b(42);
        Volume p1 = random_patch(v, {4, 4, 4}, a);
        Volume p2 = random_patch(v, {4, 4, 4}, b);
        CHECK(tensor_max_abs_diff(p1.data, p2.data) == 0.0f);
    }
    {
        Volume line(8, 1, 1);
        for (int64_t x = 0; x < 8; ++x) line.at(x, 0, 0) = static_cast<float>(x);
        Rng rng(7);
        std::array<int, 5> counts{};
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            Volume p = random_patch(line, {4, 1, 1}, rng);
            int start = static_cast<int>(p.at(0, 0, 0));
            REQUIRE(start >= 0);
            REQUIRE(start <= 4);
            counts[start]++;
        }
        for (int s = 0; s < 5; ++s) {
            double freq = counts[s] / static_cast<double>(draws);
            CHECK(freq == Catch::Approx(0.2).margin(0.02));
        }
    }
    Rng rng(3);
    CHECK_THROWS_MATCHES(random_patch(v, {9, 4, 4}, rng), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::shape_mismatch;
                         }));
}

TEST_CASE("phantom: sphere volume fraction matches analytic value") {
    PhantomSpec spec;
    spec.grid = {48, 48, 48};
    spec.seed = 5;
    spec.background_hu = {-80, -40};
    spec.background_noise_sd = 5.0f;
    RegionSpec sphere;
    sphere.name = "sphere";
    const float r = 14.0f;
    sphere.center = {RangeF{24, 24}, RangeF{24, 24}, RangeF{24, 24}};
    sphere.radius = {RangeF{r, r}, RangeF{r, r}, RangeF{r, r}};
    sphere.intensity_hu = {100, 200};
    spec.regions.push_back(sphere);

    auto [vol, lm] = generate_phantom(spec);
    int64_t inside = 0;
    for (uint16_t id : lm.data) inside += (id == 1);
    double frac = inside / static_cast<double>(lm.numel());
    double analytic = 4.0 / 3.0 * 3.14159265358979 * r * r * r / (48.0 * 48.0 * 48.0);
    CHECK(std::fabs(frac - analytic) / analytic < 0.05);

    // labeled voxels carry region intensities, others background
    for (int64_t i = 0; i < vol.numel(); ++i) {
        if (lm.data[static_cast<size_t>(i)] == 1) {
            CHECK(vol.data[i] >= 100.0f);
            CHECK(vol.data[i] <= 200.0f);
        } else {
            CHECK(vol.data[i] >= -80.0f);
            CHECK(vol.data[i] <= -40.0f);
        }
    }
}

TEST_CASE("phantom: determinism and empty region list") {
    PhantomSpec spec = default_phantom_spec({32, 32, 16}, 77);
    auto [v1, l1] = generate_phantom(spec);
    auto [v2, l2] = generate_phantom(spec);
    CHECK(v1.data.data == v2.data.data);
    CHECK(l1.data == l2.data);

    PhantomSpec empty;
    empty.grid = {8, 8, 8};
    empty.seed = 3;
    auto [vol, lm] = generate_phantom(empty);
    for (uint16_t id : lm.data) CHECK(id == 0);
    CHECK(lm.region_names.empty());
}

TEST_CASE("phantom: impossible geometry fails after rejection") {
    PhantomSpec spec;
    spec.grid = {16, 16, 16};
    spec.seed = 1;
    RegionSpec huge;
    huge.name = "huge";
    huge.center = {RangeF{8, 8}, RangeF{8, 8}, RangeF{8, 8}};
    huge.radius = {RangeF{40, 50}, RangeF{40, 50}, RangeF{40, 50}};
    huge.intensity_hu = {100, 200};
    spec.regions.push_back(huge);
    CHECK_THROWS_MATCHES(generate_phantom(spec), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::generation_failure;
                         }));
}

TEST_CASE("phantom spec rejects overlapping intensity ranges") {
    PhantomSpec spec;
    spec.grid = {16, 16, 16};
    RegionSpec a, b;
    a.name = "a";
    a.center = b.center = {RangeF{8, 8}, RangeF{8, 8}, RangeF{8, 8}};
    a.radius = b.radius = {RangeF{3, 3}, RangeF{3, 3}, RangeF{3, 3}};
    a.intensity_hu = {100, 200};
    b.name = "b";
    b.intensity_hu = {150, 250};
    spec.regions = {a, b};
    CHECK_THROWS_AS(generate_phantom(spec), Error);
}

TEST_CASE("mvol volume round-trip is bit exact") {
    auto dir = temp_dir();
    Volume v = random_volume(6, 5, 4, 13, -1000.0f, 2000.0f);
    v.spacing = {0.5f, 0.75f, 1.25f};
    v.window = IntensityWindow{-1000.0f, 2000.0f};
    auto path = dir / "roundtrip.mvol";
    write_volume(v, path);
    Volume r = read_volume(path);
    REQUIRE(r.shape() == v.shape());
    CHECK(std::memcmp(r.data.data.data(), v.data.data.data(), v.data.data.size() * sizeof(float)) == 0);
    CHECK(r.spacing == v.spacing);
    REQUIRE(r.window.has_value());
    CHECK(r.window->lo == v.window->lo);
    CHECK(r.window->hi == v.window->hi);
}

TEST_CASE("mvol label round-trip with region names") {
    auto dir = temp_dir();
    LabelMap lm(4, 3, 2);
    lm.region_names = {{1, "body"}, {2, "lv"}};
    lm.at(0, 0, 0) = 1;
    lm.at(3, 2, 1) = 2;
    auto path = dir / "label.mvol";
    write_label_map(lm, path);
    LabelMap r = read_label_map(path);
    CHECK(r.data == lm.data);
    CHECK(r.region_names == lm.region_names);
}

TEST_CASE("mvol error kinds: truncation, payload mismatch, malformed header") {
    auto dir = temp_dir();
    Volume v = random_volume(4, 4, 4, 17, -1.0f, 1.0f);
    auto path = dir / "bad.mvol";
    write_volume(v, path);

    // truncate by one byte
    auto truncated = dir / "trunc.mvol";
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(truncated, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 1));
    }
    CHECK_THROWS_MATCHES(read_volume(truncated), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::truncated_payload;
                         }));

    // header says 2x2x2 but payload holds 7 voxels
    auto mismatch = dir / "mismatch.mvol";
    {
        std::ofstream out(mismatch, std::ios::binary);
        out << "mvol 1\nshape 2 2 2\nspacing 1 1 1\ndtype f32\norder le\nkind volume\n\n";
        float payload[7] = {};
        out.write(reinterpret_cast<const char*>(payload), sizeof(payload));
    }
    CHECK_THROWS_MATCHES(read_volume(mismatch), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::payload_mismatch;
                         }));

    // payload longer than header promises
    auto overlong = dir / "overlong.mvol";
    {
        std::ofstream out(overlong, std::ios::binary);
        out << "mvol 1\nshape 2 2 2\nspacing 1 1 1\ndtype f32\norder le\nkind volume\n\n";
        float payload[9] = {};
        out.write(reinterpret_cast<const char*>(payload), sizeof(payload));
    }
    CHECK_THROWS_MATCHES(read_volume(overlong), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::payload_mismatch;
                         }));

    auto malformed = dir / "malformed.mvol";
    {
        std::ofstream out(malformed, std::ios::binary);
        out << "mvol 1\nshape 2 2\nspacing 1 1 1\n\n";
    }
    CHECK_THROWS_MATCHES(read_volume(malformed), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.kind() == ErrorKind::malformed_header;
                         }));
}

TEST_CASE("derive_threshold_windows expands bands into disjoint windows") {
    PhantomSpec spec = default_phantom_spec();
    auto windows = derive_threshold_windows(spec);
    REQUIRE(windows.size() == spec.regions.size());
    for (size_t i = 0; i < windows.size(); ++i) {
        const auto& [id, w] = windows[i];
        CHECK(id == i + 1);
        // window contains its own band
        CHECK(w.lo <= spec.regions[i].intensity_hu.lo);
        CHECK(w.hi >= spec.regions[i].intensity_hu.hi);
        // disjoint from background
        CHECK(w.lo > spec.background_hu.hi);
    }
    // windows are half-open [lo, hi): sharing an endpoint is fine
    for (size_t i = 0; i < windows.size(); ++i)
        for (size_t j = i + 1; j < windows.size(); ++j) {
            const auto& a = windows[i].second;
            const auto& b = windows[j].second;
            CHECK((a.hi <= b.lo || b.hi <= a.lo));
        }
}
