#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmate/nn.hpp"

namespace fedmate {

// Model snapshot: little-endian flat binary, magic "FMAT", u32 version,
// u32 layer count, then per layer u32 rows, u32 cols, f64 row-major
// weights, f64 biases. Layers are extractor layers followed by the
// classifier.
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ofstream& f, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw std::runtime_error("model file truncated");
    return v;
}

inline void write_layer(std::ofstream& f, const DenseLayer& l) {
    write_le<std::uint32_t>(f, std::uint32_t(l.w.rows));
    write_le<std::uint32_t>(f, std::uint32_t(l.w.cols));
    for (double v : l.w.a) write_le<double>(f, v);
    for (double v : l.b) write_le<double>(f, v);
}

inline DenseLayer read_layer(std::ifstream& f) {
    const auto rows = read_le<std::uint32_t>(f);
    const auto cols = read_le<std::uint32_t>(f);
    DenseLayer l(rows, cols);
    for (double& v : l.w.a) v = read_le<double>(f);
    for (double& v : l.b) v = read_le<double>(f);
    return l;
}

}  // namespace detail

inline void save_model(const ModelParams& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_model: cannot open " + path);
    f.write("FMAT", 4);
    detail::write_le<std::uint32_t>(f, kModelFormatVersion);
    detail::write_le<std::uint32_t>(f, std::uint32_t(m.extractor.size() + 1));
    for (const auto& l : m.extractor) detail::write_layer(f, l);
    detail::write_layer(f, m.classifier);
}

inline ModelParams load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_model: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "FMAT", 4) != 0)
        throw std::runtime_error("load_model: bad magic in " + path);
    const auto version = detail::read_le<std::uint32_t>(f);
    if (version != kModelFormatVersion)
        throw std::runtime_error("load_model: unsupported version in " + path);
    const auto layers = detail::read_le<std::uint32_t>(f);
    if (layers < 2) throw std::runtime_error("load_model: need at least 2 layers");
    ModelParams m;
    for (std::uint32_t i = 0; i + 1 < layers; ++i) m.extractor.push_back(detail::read_layer(f));
    m.classifier = detail::read_layer(f);
    return m;
}

// Fixed-width float formatting so metrics files are byte-reproducible.
inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace fedmate
