#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "streamrec/tensor.hpp"

namespace streamrec {

/// Little-endian binary container primitives. All floating point data is
/// stored as 64-bit IEEE754 regardless of the build's `real` width, so
/// checkpoints written by the default build round-trip bit-exactly.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v);
    void f64(double v);
    void str(const std::string& s);
    void f64_array(const std::vector<real>& v);
    void close();

private:
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path);
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64();
    double f64();
    std::string str();
    std::vector<real> f64_array();

private:
    void read_bytes(void* dst, std::size_t n);
    std::ifstream in_;
};

constexpr std::uint64_t kTensorSectionMagic = 0x5352544E53523031ull; // "SRTNSR01"

/// {name -> shape, data} container; the numerics checkpoint format.
void write_tensors(BinaryWriter& w, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_tensors(BinaryReader& r);

void save_tensors_file(const std::string& path,
                       const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_tensors_file(const std::string& path);

} // namespace streamrec
