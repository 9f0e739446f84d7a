#include "streamrec/checkpoint.hpp"

#include <cstring>

namespace streamrec {

namespace {

template <typename T>
void put_le(std::ofstream& out, T v) {
    unsigned char buf[sizeof(T)];
    std::uint64_t bits;
    if constexpr (sizeof(T) == 8 && std::is_floating_point_v<T>) {
        std::memcpy(&bits, &v, 8);
    } else {
        bits = static_cast<std::uint64_t>(v);
    }
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

std::uint64_t get_le64(std::ifstream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) raise(ErrorCode::Io, "checkpoint: unexpected end of file");
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return bits;
}

std::uint32_t get_le32(std::ifstream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) raise(ErrorCode::Io, "checkpoint: unexpected end of file");
    std::uint32_t bits = 0;
    for (std::size_t i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return bits;
}

} // namespace

BinaryWriter::BinaryWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) raise(ErrorCode::Io, "cannot open for writing: " + path);
}

void BinaryWriter::u32(std::uint32_t v) { put_le(out_, v); }
void BinaryWriter::u64(std::uint64_t v) { put_le(out_, v); }
void BinaryWriter::i64(std::int64_t v) { put_le(out_, static_cast<std::uint64_t>(v)); }
void BinaryWriter::f64(double v) { put_le(out_, v); }

void BinaryWriter::str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::f64_array(const std::vector<real>& v) {
    u64(v.size());
    for (real x : v) f64(static_cast<double>(x));
}

void BinaryWriter::close() {
    out_.close();
    if (!out_) raise(ErrorCode::Io, "checkpoint: write failure on close");
}

BinaryReader::BinaryReader(const std::string& path)
    : in_(path, std::ios::binary) {
    if (!in_) raise(ErrorCode::Io, "cannot open for reading: " + path);
}

void BinaryReader::read_bytes(void* dst, std::size_t n) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) raise(ErrorCode::Io, "checkpoint: unexpected end of file");
}

std::uint32_t BinaryReader::u32() { return get_le32(in_); }
std::uint64_t BinaryReader::u64() { return get_le64(in_); }
std::int64_t BinaryReader::i64() { return static_cast<std::int64_t>(get_le64(in_)); }

double BinaryReader::f64() {
    const std::uint64_t bits = get_le64(in_);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string BinaryReader::str() {
    const std::uint64_t n = u64();
    std::string s(n, '\0');
    if (n) read_bytes(s.data(), n);
    return s;
}

std::vector<real> BinaryReader::f64_array() {
    const std::uint64_t n = u64();
    std::vector<real> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = static_cast<real>(f64());
    return v;
}

void write_tensors(BinaryWriter& w, const std::map<std::string, Tensor>& tensors) {
    w.u64(kTensorSectionMagic);
    w.u64(tensors.size());
    for (const auto& [name, t] : tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d : t.shape()) w.u64(d);
        w.f64_array(t.data());
    }
}

std::map<std::string, Tensor> read_tensors(BinaryReader& r) {
    if (r.u64() != kTensorSectionMagic)
        raise(ErrorCode::Version, "checkpoint: bad tensor-section magic (version mismatch?)");
    const std::uint64_t count = r.u64();
    std::map<std::string, Tensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const std::uint32_t ndim = r.u32();
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
        std::vector<real> data = r.f64_array();
        out.emplace(name, Tensor::from(std::move(data), std::move(shape)));
    }
    return out;
}

void save_tensors_file(const std::string& path,
                       const std::map<std::string, Tensor>& tensors) {
    BinaryWriter w(path);
    write_tensors(w, tensors);
    w.close();
}

std::map<std::string, Tensor> load_tensors_file(const std::string& path) {
    BinaryReader r(path);
    return read_tensors(r);
}

} // namespace streamrec
