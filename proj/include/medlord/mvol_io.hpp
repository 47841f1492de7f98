#ifndef MEDLORD_MVOL_IO_HPP
#define MEDLORD_MVOL_IO_HPP

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "medlord/volume.hpp"

namespace medlord {

// .mvol: UTF-8 key/value header terminated by a blank line, then a raw
// little-endian payload (f32 for volumes, u16 for label maps), x-fastest.
//
//   mvol 1
//   shape 64 64 32
//   spacing 1 1 1
//   window -1000 2000        (volumes only, present once normalized)
//   dtype f32
//   order le
//   kind volume
//   regions 1:body,2:lv      (label maps only)
//
// Round-trips are bit-exact: payload bytes are the in-memory float/u16 bits.

namespace detail {

inline bool host_is_little_endian() {
    const uint16_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

struct MvolHeader {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::array<float, 3> spacing{1, 1, 1};
    bool has_window = false;
    IntensityWindow window;
    std::string dtype;
    std::string kind;
    std::map<uint16_t, std::string> regions;
};

inline MvolHeader parse_mvol_header(std::istream& in, const std::string& path) {
    MvolHeader h;
    std::string line;
    if (!std::getline(in, line) || line != "mvol 1")
        fail(ErrorKind::malformed_header, path + ": missing 'mvol 1' magic line");
    bool saw_blank = false;
    bool saw_shape = false, saw_dtype = false, saw_order = false, saw_kind = false;
    while (std::getline(in, line)) {
        if (line.empty()) {
            saw_blank = true;
            break;
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "shape") {
            ls >> h.shape[0] >> h.shape[1] >> h.shape[2];
            if (ls.fail() || h.shape[0] <= 0 || h.shape[1] <= 0 || h.shape[2] <= 0)
                fail(ErrorKind::malformed_header, path + ": bad shape line");
            saw_shape = true;
        } else if (key == "spacing") {
            ls >> h.spacing[0] >> h.spacing[1] >> h.spacing[2];
            if (ls.fail() || h.spacing[0] <= 0 || h.spacing[1] <= 0 || h.spacing[2] <= 0)
                fail(ErrorKind::malformed_header, path + ": bad spacing line");
        } else if (key == "window") {
            ls >> h.window.lo >> h.window.hi;
            if (ls.fail() || !(h.window.lo < h.window.hi))
                fail(ErrorKind::malformed_header, path + ": bad window line");
            h.has_window = true;
        } else if (key == "dtype") {
            ls >> h.dtype;
            if (h.dtype != "f32" && h.dtype != "u16")
                fail(ErrorKind::malformed_header, path + ": unsupported dtype '" + h.dtype + "'");
            saw_dtype = true;
        } else if (key == "order") {
            std::string order;
            ls >> order;
            if (order != "le")
                fail(ErrorKind::malformed_header, path + ": unsupported byte order '" + order + "'");
            saw_order = true;
        } else if (key == "kind") {
            ls >> h.kind;
            if (h.kind != "volume" && h.kind != "label")
                fail(ErrorKind::malformed_header, path + ": unsupported kind '" + h.kind + "'");
            saw_kind = true;
        } else if (key == "regions") {
            std::string rest;
            ls >> rest;
            std::istringstream rs(rest);
            std::string item;
            while (std::getline(rs, item, ',')) {
                auto colon = item.find(':');
                if (colon == std::string::npos)
                    fail(ErrorKind::malformed_header, path + ": bad regions entry '" + item + "'");
                int id = std::stoi(item.substr(0, colon));
                if (id <= 0 || id > 65535)
                    fail(ErrorKind::malformed_header, path + ": region id out of range");
                h.regions[static_cast<uint16_t>(id)] = item.substr(colon + 1);
            }
        } else {
            fail(ErrorKind::malformed_header, path + ": unknown header key '" + key + "'");
        }
    }
    if (!saw_blank) fail(ErrorKind::malformed_header, path + ": header not terminated by blank line");
    if (!saw_shape || !saw_dtype || !saw_order || !saw_kind)
        fail(ErrorKind::malformed_header, path + ": header missing required keys");
    if (h.kind == "volume" && h.dtype != "f32")
        fail(ErrorKind::malformed_header, path + ": volume payload must be f32");
    if (h.kind == "label" && h.dtype != "u16")
        fail(ErrorKind::malformed_header, path + ": label payload must be u16");
    return h;
}

template <typename T>
void read_payload_le(std::istream& in, T* dst, size_t n, const std::string& path,
                     const std::array<int64_t, 3>& shape) {
    const size_t bytes = n * sizeof(T);
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    const size_t got = static_cast<size_t>(in.gcount());
    if (got < bytes) {
        // whole-voxel shortfall means the header shape disagrees with the
        // payload; a partial voxel means the file was cut off mid-write
        if (got % sizeof(T) == 0)
            fail(ErrorKind::payload_mismatch,
                 path + ": payload holds " + std::to_string(got / sizeof(T)) +
                     " elements, header shape promises " + std::to_string(n));
        fail(ErrorKind::truncated_payload, path + ": payload truncated (" + std::to_string(got) +
                                               " of " + std::to_string(bytes) + " bytes)");
    }
    // trailing bytes mean the header shape undersells the payload
    char probe;
    if (in.read(&probe, 1); in.gcount() == 1)
        fail(ErrorKind::payload_mismatch,
             path + ": payload larger than header shape " + std::to_string(shape[0]) + "x" +
                 std::to_string(shape[1]) + "x" + std::to_string(shape[2]));
    if (!host_is_little_endian()) {
        auto* raw = reinterpret_cast<unsigned char*>(dst);
        for (size_t i = 0; i < n; ++i)
            for (size_t b = 0; b < sizeof(T) / 2; ++b)
                std::swap(raw[i * sizeof(T) + b], raw[i * sizeof(T) + sizeof(T) - 1 - b]);
    }
}

template <typename T>
void write_payload_le(std::ostream& out, const T* src, size_t n) {
    if (host_is_little_endian()) {
        out.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n * sizeof(T)));
        return;
    }
    std::vector<unsigned char> buf(n * sizeof(T));
    std::memcpy(buf.data(), src, buf.size());
    for (size_t i = 0; i < n; ++i)
        for (size_t b = 0; b < sizeof(T) / 2; ++b)
            std::swap(buf[i * sizeof(T) + b], buf[i * sizeof(T) + sizeof(T) - 1 - b]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

} // namespace detail

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "write_volume: cannot open " + path.string());
    std::ostringstream hdr;
    hdr << "mvol 1\n";
    hdr << "shape " << v.nx() << " " << v.ny() << " " << v.nz() << "\n";
    hdr << "spacing " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
    if (v.window) hdr << "window " << v.window->lo << " " << v.window->hi << "\n";
    hdr << "dtype f32\norder le\nkind volume\n\n";
    out << hdr.str();
    detail::write_payload_le(out, v.data.data.data(), v.data.data.size());
    require(out.good(), ErrorKind::io, "write_volume: write failed for " + path.string());
}

inline Volume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "read_volume: cannot open " + path.string());
    auto h = detail::parse_mvol_header(in, path.string());
    require(h.kind == "volume", ErrorKind::malformed_header, path.string() + ": expected kind volume");
    Volume v(h.shape[0], h.shape[1], h.shape[2]);
    v.spacing = h.spacing;
    if (h.has_window) v.window = h.window;
    detail::read_payload_le(in, v.data.data.data(), v.data.data.size(), path.string(), h.shape);
    return v;
}

inline void write_label_map(const LabelMap& lm, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "write_label_map: cannot open " + path.string());
    std::ostringstream hdr;
    hdr << "mvol 1\n";
    hdr << "shape " << lm.nx() << " " << lm.ny() << " " << lm.nz() << "\n";
    hdr << "spacing 1 1 1\n";
    hdr << "dtype u16\norder le\nkind label\n";
    if (!lm.region_names.empty()) {
        hdr << "regions ";
        bool first = true;
        for (const auto& [id, name] : lm.region_names) {
            if (!first) hdr << ",";
            hdr << int(id) << ":" << name;
            first = false;
        }
        hdr << "\n";
    }
    hdr << "\n";
    out << hdr.str();
    detail::write_payload_le(out, lm.data.data(), lm.data.size());
    require(out.good(), ErrorKind::io, "write_label_map: write failed for " + path.string());
}

inline LabelMap read_label_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "read_label_map: cannot open " + path.string());
    auto h = detail::parse_mvol_header(in, path.string());
    require(h.kind == "label", ErrorKind::malformed_header, path.string() + ": expected kind label");
    LabelMap lm(h.shape[0], h.shape[1], h.shape[2]);
    lm.region_names = h.regions;
    detail::read_payload_le(in, lm.data.data(), lm.data.size(), path.string(), h.shape);
    for (uint16_t id : lm.data)
        if (id != 0 && !lm.region_names.count(id))
            fail(ErrorKind::unknown_label, path.string() + ": label id " + std::to_string(id) +
                                               " missing from regions header");
    return lm;
}

inline uint64_t file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "file_digest: cannot open " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    return h;
}

} // namespace medlord

#endif
