#pragma once

// Named-tensor container: one line of compact JSON
//   {"byte_order":"little","dtype":"f32","names":[...],"shape":[[...],...]}
// then '\n', then each tensor's little-endian float32 payload in name order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "tryon/errors.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

using TensorMap = std::map<std::string, Tensor<float>>;

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xff) << 24) | ((v & 0xff00) << 8) | ((v >> 8) & 0xff00) | (v >> 24);
    }
    return v;
}

inline nlohmann::json container_header(const TensorMap& tensors) {
    nlohmann::json names = nlohmann::json::array(), shapes = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        names.push_back(name);
        shapes.push_back(t.shape());
    }
    return {{"byte_order", "little"}, {"dtype", "f32"}, {"names", names}, {"shape", shapes}};
}

}  // namespace detail

inline std::string encode_tensor_container(const TensorMap& tensors) {
    std::string out = detail::container_header(tensors).dump();
    out.push_back('\n');
    for (const auto& [name, t] : tensors) {
        if (!t.all_finite()) {
            throw InvalidArgument("container: tensor '" + name + "' has non-finite values");
        }
        for (float v : t.data()) {
            const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(v));
            char b[4];
            std::memcpy(b, &bits, 4);
            out.append(b, 4);
        }
    }
    return out;
}

struct ContainerHeader {
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::size_t header_bytes = 0;  // including the newline

    std::size_t payload_bytes() const {
        std::size_t n = 0;
        for (const auto& s : shapes) {
            n += 4 * shape_size(s);
        }
        return n;
    }
};

inline ContainerHeader parse_container_header(std::string_view bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos) {
        throw FormatError("container: header line is not terminated");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: malformed header: ") + e.what());
    }
    ContainerHeader h;
    try {
        if (j.at("dtype") != "f32" || j.at("byte_order") != "little") {
            throw FormatError("container: unsupported dtype/byte_order");
        }
        h.names = j.at("names").get<std::vector<std::string>>();
        for (const auto& s : j.at("shape")) {
            h.shapes.push_back(s.get<Shape>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: malformed header: ") + e.what());
    }
    if (h.names.size() != h.shapes.size()) {
        throw FormatError("container: names and shapes differ in length");
    }
    for (const auto& s : h.shapes) {
        if (s.empty() || std::any_of(s.begin(), s.end(), [](std::size_t d) { return d == 0; })) {
            throw FormatError("container: invalid shape " + shape_str(s));
        }
    }
    h.header_bytes = nl + 1;
    return h;
}

inline TensorMap decode_tensor_container(std::string_view bytes) {
    const ContainerHeader h = parse_container_header(bytes);
    const std::size_t expected = h.payload_bytes(), actual = bytes.size() - h.header_bytes;
    if (actual != expected) {
        throw FormatError("container: payload is " + std::to_string(actual) + " bytes, expected " +
                          std::to_string(expected));
    }
    TensorMap out;
    std::size_t off = h.header_bytes;
    for (std::size_t i = 0; i < h.names.size(); ++i) {
        Tensor<float> t(h.shapes[i]);
        for (auto& v : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, bytes.data() + off, 4);
            v = std::bit_cast<float>(detail::to_little(bits));
            off += 4;
        }
        if (!out.emplace(h.names[i], std::move(t)).second) {
            throw FormatError("container: duplicate tensor name '" + h.names[i] + "'");
        }
    }
    return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    if (f.bad()) {
        throw IoError("read failed: " + path.string());
    }
    return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

inline void write_tensor_container(const std::filesystem::path& path, const TensorMap& tensors) {
    write_file_bytes(path, encode_tensor_container(tensors));
}

inline TensorMap read_tensor_container(const std::filesystem::path& path) {
    return decode_tensor_container(read_file_bytes(path));
}

}  // namespace tryon
