#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "dn4/tensor.hpp"

namespace dn4 {

// DN4T blob: "DN4T", version 0x01, dtype 0x00 (float32 LE), ndims (u8),
// ndims x u32 LE extents, row-major payload.
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);
/// Reads only magic, version, dtype and extents.
Shape read_tensor_shape(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);
Shape load_tensor_shape(const std::filesystem::path& path);

/// Ordered list of named tensors, stored as "DN4C", version byte, u32 count,
/// then per entry u16 name length, UTF-8 name and a DN4T blob.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> entries;

    void add(std::string name, Tensor tensor) { entries.emplace_back(std::move(name), std::move(tensor)); }
    bool contains(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dn4
