#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "collapse_lab/arch/params.hpp"
#include "collapse_lab/numerics/matrix.hpp"
#include "json.hpp"

namespace collapse_lab::io {

/// Binary tensor container:
///   8 bytes   magic "CLABPRM1"
///   8 bytes   little-endian u64 length of the JSON header
///   header    UTF-8 JSON {format, version, kind, tensors: [{name, rows, cols, offset}], ...}
///   payload   little-endian float64 data, row-major, offsets in bytes from payload start
struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Container {
    std::string kind;
    nlohmann::json meta = nlohmann::json::object();  // extra header fields
    std::vector<NamedTensor> tensors;

    [[nodiscard]] const Matrix& at(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
[[nodiscard]] Container read_container(const std::filesystem::path& path);

[[nodiscard]] Container to_container(const ResNetParams& p);
[[nodiscard]] Container to_container(const TransformerParams& p);
[[nodiscard]] ResNetParams resnet_from_container(const Container& c);
[[nodiscard]] TransformerParams transformer_from_container(const Container& c);

}  // namespace collapse_lab::io
