// SPDX-License-Identifier: Apache-2.0
#include "omni/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace omni {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "weights.bin is written in native little-endian order");

std::string shape_token(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape(const std::string& tok) {
    Shape s;
    std::stringstream ss(tok);
    std::string part;
    while (std::getline(ss, part, 'x')) s.push_back(std::stoi(part));
    return s;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    std::ofstream weights(dir / "weights.bin", std::ios::binary);
    if (!manifest || !weights) throw std::runtime_error("cannot write checkpoint in " + dir.string());
    std::size_t offset = 0;
    for (const Parameter& p : params.all()) {
        const std::size_t bytes = p.tensor.numel() * sizeof(double);
        manifest << p.name << ' ' << shape_token(p.tensor.shape()) << " f64 " << offset << ' ' << bytes << '\n';
        weights.write(reinterpret_cast<const char*>(p.tensor.values().data()), static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    if (!manifest || !weights) throw std::runtime_error("short write in checkpoint " + dir.string());
}

std::vector<Parameter> read_checkpoint(const fs::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    std::ifstream weights(dir / "weights.bin", std::ios::binary);
    if (!manifest || !weights) throw std::runtime_error("missing checkpoint files in " + dir.string());
    std::vector<Parameter> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, shape, dtype;
        std::size_t offset = 0, length = 0;
        if (!(ls >> name >> shape >> dtype >> offset >> length) || dtype != "f64")
            throw std::runtime_error("malformed manifest line: " + line);
        Shape s = parse_shape(shape);
        if (numel(s) * sizeof(double) != length) throw std::runtime_error("manifest length mismatch for " + name);
        std::vector<double> v(numel(s));
        weights.seekg(static_cast<std::streamoff>(offset));
        weights.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(length));
        if (!weights) throw std::runtime_error("truncated weights.bin at " + name);
        out.push_back({name, Tensor::from(std::move(s), std::move(v)), false});
    }
    return out;
}

void load_checkpoint(ParamStore& params, const fs::path& dir, bool allow_missing) {
    const auto entries = read_checkpoint(dir);
    std::map<std::string, const Parameter*> by_name;
    for (const Parameter& e : entries) by_name[e.name] = &e;
    for (Parameter& p : params.all()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            if (allow_missing) continue;
            throw ContractError("checkpoint " + dir.string() + " lacks parameter " + p.name);
        }
        const Tensor& src = it->second->tensor;
        if (src.shape() != p.tensor.shape())
            throw ShapeError("checkpoint shape for " + p.name + ": " + shape_str(src.shape()) + " vs " +
                             shape_str(p.tensor.shape()));
        auto v = p.tensor.mutable_values();
        std::copy(src.values().begin(), src.values().end(), v.begin());
    }
}

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

std::string params_digest(const ParamStore& params, bool frozen_only) {
    return params_digest(params, [frozen_only](const Parameter& p) { return !frozen_only || p.frozen; });
}

std::string params_digest(const ParamStore& params, const std::function<bool(const Parameter&)>& keep) {
    std::string buf;
    for (const Parameter& p : params.all()) {
        if (!keep(p)) continue;
        buf += p.name;
        buf.push_back('\0');
        const auto v = p.tensor.values();
        buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    }
    return sha256_hex(buf.data(), buf.size());
}

}  // namespace omni
