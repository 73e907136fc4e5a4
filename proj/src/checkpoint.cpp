#include "pyramidat/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pyramidat/errors.hpp"

namespace pyramidat {

namespace {

void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

// float payloads are stored little-endian; this build targets little-endian
// hosts and writes raw IEEE-754 bits.
static_assert(sizeof(float) == 4);

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"image_size", c.image_size},   {"patch_size", c.patch_size},
                          {"embed_dim", c.embed_dim},     {"depth", c.depth},
                          {"n_heads", c.n_heads},         {"mlp_dim", c.mlp_dim},
                          {"n_classes", c.n_classes},     {"in_channels", c.in_channels},
                          {"dropout_p", c.dropout_p},     {"stochdepth_p", c.stochdepth_p}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.mlp_dim = j.at("mlp_dim").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.dropout_p = j.at("dropout_p").get<float>();
    c.stochdepth_p = j.at("stochdepth_p").get<float>();
    return c;
}

void save_container(const std::filesystem::path& path, const Container& c) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["model_config"] = model_config_to_json(c.config);
    header["meta"] = c.meta.is_null() ? nlohmann::json::object() : c.meta;
    nlohmann::json entries = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& a : c.arrays) {
        entries.push_back({{"path", a.path},
                           {"shape", a.shape},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"count", a.data.size()}});
        offset += a.data.size();
    }
    header["entries"] = std::move(entries);
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create checkpoint file: " + path.string());
    out.write(kContainerMagic, 8);
    write_u64_le(out, hs.size());
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& a : c.arrays)
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    if (!out) throw DataError("short write to checkpoint file: " + path.string());
}

Container load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kContainerMagic, 8) != 0)
        throw DataError("not a checkpoint container: " + path.string());
    const std::uint64_t hlen = read_u64_le(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError("truncated checkpoint header: " + path.string());
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw DataError("corrupt checkpoint header: " + path.string());
    if (header.at("format_version").get<int>() != 1)
        throw DataError("unsupported checkpoint version: " + path.string());

    Container c;
    c.config = model_config_from_json(header.at("model_config"));
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header.at("entries")) {
        NamedArray a;
        a.path = e.at("path").get<std::string>();
        a.shape = e.at("shape").get<std::vector<int>>();
        a.data.resize(e.at("count").get<std::size_t>());
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        if (!in) throw DataError("truncated checkpoint payload: " + path.string());
        c.arrays.push_back(std::move(a));
    }
    return c;
}

std::vector<NamedArray> params_to_arrays(const ModelParams<float>& params) {
    std::vector<NamedArray> out;
    out.reserve(params.entries.size());
    for (const auto& e : params.entries) {
        NamedArray a;
        a.path = e.path;
        a.shape = e.shape;
        a.data.assign(params.values.begin() + static_cast<std::ptrdiff_t>(e.offset),
                      params.values.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size()));
        out.push_back(std::move(a));
    }
    return out;
}

ModelParams<float> params_from_container(const Container& c) {
    ModelParams<float> params = init_params<float>(c.config, 0);
    for (const auto& e : params.entries) {
        const NamedArray* a = c.find(e.path);
        if (!a) throw DataError("checkpoint missing parameter: " + e.path);
        if (a->shape != e.shape || a->data.size() != e.size())
            throw DataError("checkpoint shape mismatch for: " + e.path);
        std::copy(a->data.begin(), a->data.end(), params.values.begin() + e.offset);
    }
    return params;
}

void save_pfa(const std::filesystem::path& path, const std::vector<int>& shape,
              const float* data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create array file: " + path.string());
    out.write("PATF0001", 8);
    write_u32_le(out, static_cast<std::uint32_t>(shape.size()));
    std::size_t n = 1;
    for (int d : shape) {
        write_u32_le(out, static_cast<std::uint32_t>(d));
        n *= static_cast<std::size_t>(d);
    }
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(n * sizeof(float)));
    if (!out) throw DataError("short write to array file: " + path.string());
}

Tensor<float> load_pfa(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open array file: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "PATF0001", 8) != 0)
        throw DataError("not a portable float array: " + path.string());
    const std::uint32_t ndim = read_u32_le(in);
    if (ndim == 0 || ndim > 8) throw DataError("bad array rank in: " + path.string());
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_u32_le(in));
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw DataError("truncated array file: " + path.string());
    return t;
}

}  // namespace pyramidat
