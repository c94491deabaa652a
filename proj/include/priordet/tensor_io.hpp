// Binary tensor snapshots: magic "TNSR", rank and dims as little-endian
// 64-bit unsigned, then the payload as little-endian 64-bit floats. Used for
// golden files, generated images and checkpoints.

#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>

#include "priordet/tensor.hpp"

namespace priordet {

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline double get_f64(std::istream& is) {
    const std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
    os.write("TNSR", 4);
    detail::put_u64(os, static_cast<std::uint64_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u64(os, static_cast<std::uint64_t>(t.dim(i)));
    for (S v : t.values()) detail::put_f64(os, static_cast<double>(v));
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
    write_tensor(os, t);
    if (!os) throw std::runtime_error("save_tensor: write failed for " + path);
}

template <typename S = double>
Tensor<S> read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0)
        throw std::runtime_error("read_tensor: bad magic (expected TNSR)");
    const std::uint64_t rank = detail::get_u64(is);
    if (rank > 16) throw std::runtime_error("read_tensor: implausible rank " + std::to_string(rank));
    Dims shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(detail::get_u64(is));
    const std::int64_t n = numel_of(shape);
    std::vector<S> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<S>(detail::get_f64(is));
    if (!is) throw std::runtime_error("read_tensor: truncated payload");
    return Tensor<S>::from(std::move(shape), std::move(data));
}

template <typename S = double>
Tensor<S> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
    return read_tensor<S>(is);
}

}  // namespace priordet
