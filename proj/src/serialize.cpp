#include "dn4/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dn4 {
namespace {

static_assert(std::endian::native == std::endian::little, "DN4T I/O assumes a little-endian host");

constexpr std::array<char, 4> kTensorMagic{'D', 'N', '4', 'T'};
constexpr std::array<char, 4> kCheckpointMagic{'D', 'N', '4', 'C'};
constexpr std::uint8_t kVersion = 0x01;
constexpr std::uint8_t kFloat32 = 0x00;

template <class U>
void put(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& in, const char* what) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) {
        throw FormatError(std::string("truncated stream while reading ") + what);
    }
    return v;
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic, const char* what) {
    std::array<char, 4> got{};
    if (!in.read(got.data(), 4)) throw FormatError(std::string("truncated ") + what + " header");
    if (got != magic) throw FormatError(std::string("bad ") + what + " magic");
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
    if (tensor.ndim() > 255) throw DimensionError("DN4T supports at most 255 dimensions");
    out.write(kTensorMagic.data(), 4);
    put<std::uint8_t>(out, kVersion);
    put<std::uint8_t>(out, kFloat32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.ndim()));
    for (auto e : tensor.shape()) {
        if (e > UINT32_MAX) throw DimensionError("DN4T extent exceeds u32");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(float)));
}

Shape read_tensor_shape(std::istream& in) {
    expect_magic(in, kTensorMagic, "DN4T");
    const auto version = get<std::uint8_t>(in, "version");
    if (version != kVersion) throw FormatError("unsupported DN4T version " + std::to_string(version));
    const auto dtype = get<std::uint8_t>(in, "dtype");
    if (dtype != kFloat32) throw FormatError("unsupported DN4T dtype " + std::to_string(dtype));
    const auto ndims = get<std::uint8_t>(in, "ndims");
    Shape shape(ndims);
    for (auto& e : shape) {
        e = get<std::uint32_t>(in, "extent");
        if (e == 0) throw FormatError("DN4T extent of zero");
    }
    return shape;
}

Tensor read_tensor(std::istream& in) {
    Shape shape = read_tensor_shape(in);
    std::vector<float> data(shape_size(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
        throw FormatError("truncated DN4T payload");
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path.string());
    write_tensor(out, tensor);
    if (!out) throw Error("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open tensor file: " + path.string());
    return read_tensor(in);
}

Shape load_tensor_shape(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open tensor file: " + path.string());
    return read_tensor_shape(in);
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) return true;
    }
    return false;
}

const Tensor& Checkpoint::at(const std::string& name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) return t;
    }
    throw ConfigError("checkpoint has no tensor named '" + name + "'");
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
    out.write(kCheckpointMagic.data(), 4);
    put<std::uint8_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& [name, tensor] : ckpt.entries) {
        if (name.size() > UINT16_MAX) throw FormatError("checkpoint tensor name too long");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(out, tensor);
    }
}

Checkpoint read_checkpoint(std::istream& in) {
    expect_magic(in, kCheckpointMagic, "DN4C");
    const auto version = get<std::uint8_t>(in, "version");
    if (version != kVersion) throw FormatError("unsupported DN4C version " + std::to_string(version));
    const auto count = get<std::uint32_t>(in, "tensor count");
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint16_t>(in, "name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw FormatError("truncated checkpoint name");
        ckpt.add(std::move(name), read_tensor(in));
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path.string());
    write_checkpoint(out, ckpt);
    if (!out) throw Error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("checkpoint not found: " + path.string());
    return read_checkpoint(in);
}

}  // namespace dn4
