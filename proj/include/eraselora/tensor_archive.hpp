#pragma once

// Named-tensor archive: little-endian float32 payloads with shape headers.
//
//   magic "ELTA" | u32 version (1) | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims[rank] | f32 data[prod(dims)]

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "eraselora/digest.hpp"
#include "eraselora/png_io.hpp"

namespace eraselora {

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<double> data;

    static NamedTensor from_matrix(std::string name, const Eigen::MatrixXd& m)
    {
        NamedTensor t{std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
        t.data.reserve(static_cast<std::size_t>(m.size()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                t.data.push_back(m(r, c));
        return t;
    }

    static NamedTensor scalar(std::string name, double v) { return NamedTensor{std::move(name), {}, {v}}; }

    Eigen::MatrixXd to_matrix() const
    {
        require(shape.size() == 2, "tensor '" + name + "' is not a matrix");
        Eigen::MatrixXd m(shape[0], shape[1]);
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = data[k++];
        return m;
    }

    std::size_t elements() const
    {
        std::size_t n = 1;
        for (auto d : shape)
            n *= d;
        return n;
    }
};

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(Bytes& out, float f)
{
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class ByteReader {
public:
    explicit ByteReader(const Bytes& bytes) : bytes_(bytes) {}

    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= std::uint32_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
        pos_ += 4;
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string str(std::size_t n)
    {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > bytes_.size())
            fail(ErrorCode::invalid_input, "truncated tensor payload");
    }

    const Bytes& bytes_;
    std::size_t pos_ = 0;
};

inline void put_tensor(Bytes& out, const NamedTensor& t)
{
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape)
        put_u32(out, d);
    require(t.data.size() == t.elements(), "tensor '" + t.name + "' data does not match its shape");
    for (double v : t.data)
        put_f32(out, static_cast<float>(v));
}

inline NamedTensor get_tensor(ByteReader& in)
{
    NamedTensor t;
    t.name = in.str(in.u32());
    const auto rank = in.u32();
    require(rank <= 8, "tensor rank too large");
    for (std::uint32_t i = 0; i < rank; ++i)
        t.shape.push_back(in.u32());
    const auto n = t.elements();
    t.data.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        t.data.push_back(in.f32());
    return t;
}

} // namespace detail

inline Bytes encode_tensor_archive(const std::vector<NamedTensor>& tensors)
{
    Bytes out{'E', 'L', 'T', 'A'};
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors)
        detail::put_tensor(out, t);
    return out;
}

inline std::vector<NamedTensor> decode_tensor_archive(const Bytes& bytes)
{
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "ELTA", 4) != 0)
        fail(ErrorCode::invalid_input, "not a tensor archive");
    detail::ByteReader in(bytes);
    in.str(4);
    if (in.u32() != 1)
        fail(ErrorCode::invalid_input, "unsupported tensor archive version");
    const auto count = in.u32();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i)
        out.push_back(detail::get_tensor(in));
    if (!in.done())
        fail(ErrorCode::invalid_input, "trailing bytes after tensor archive");
    return out;
}

/// SHA-256 over the float64 bytes of every tensor; used for freeze checks, so it is exact.
inline std::string parameter_checksum(const std::vector<NamedTensor>& tensors)
{
    Bytes buf;
    for (const auto& t : tensors) {
        buf.insert(buf.end(), t.name.begin(), t.name.end());
        for (auto d : t.shape)
            detail::put_u32(buf, d);
        for (double v : t.data) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i)
                buf.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
        }
    }
    return sha256_hex(buf);
}

} // namespace eraselora
