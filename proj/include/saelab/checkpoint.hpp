// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor container format, bit-exact round trip:
//   magic "VSTA1"
//   u64   entry count
//   per entry: u64 name length, UTF-8 name bytes,
//              u64 rank, u64 dims[rank],
//              f64 data[numel]
// All integers and floats little-endian.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "saelab/tensor.hpp"

namespace saelab {

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("container: truncated integer field");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
    uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline constexpr const char* kContainerMagic = "VSTA1";

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

inline void save_container(const std::filesystem::path& path, const NamedTensorList& entries) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("container: cannot open " + tmp.string() + " for writing");
        os.write(kContainerMagic, 5);
        detail::write_u64(os, entries.size());
        for (const auto& [name, t] : entries) {
            detail::write_u64(os, name.size());
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_u64(os, t.ndim());
            for (size_t d : t.shape()) detail::write_u64(os, d);
            for (size_t i = 0; i < t.numel(); ++i) detail::write_f64(os, t.at(i));
        }
        if (!os) throw IoError("container: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline NamedTensorList load_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("container: cannot open " + path.string());
    char magic[5];
    is.read(magic, 5);
    if (!is || std::string(magic, 5) != kContainerMagic)
        throw IoError("container: bad magic in " + path.string());
    uint64_t count = detail::read_u64(is);
    NamedTensorList entries;
    entries.reserve(count);
    for (uint64_t e = 0; e < count; ++e) {
        uint64_t name_len = detail::read_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!is) throw IoError("container: truncated name in " + path.string());
        uint64_t rank = detail::read_u64(is);
        Shape shape(rank);
        for (uint64_t i = 0; i < rank; ++i) shape[i] = detail::read_u64(is);
        size_t numel = shape_numel(shape);
        std::vector<double> data(numel);
        for (size_t i = 0; i < numel; ++i) data[i] = detail::read_f64(is);
        entries.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
    }
    return entries;
}

/// Lookup helper; containers written by this artifact have unique names.
inline Tensor container_get(const NamedTensorList& entries, const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw IoError("container: missing entry '" + name + "'");
}

inline bool container_has(const NamedTensorList& entries, const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return true;
    return false;
}

}  // namespace saelab
