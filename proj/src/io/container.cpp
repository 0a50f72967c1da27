#include "collapse_lab/io/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "collapse_lab/error.hpp"

namespace collapse_lab::io {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'L', 'A', 'B', 'P', 'R', 'M', '1'};
constexpr int kVersion = 1;

}  // namespace

const Matrix& Container::at(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return t.value;
        }
    }
    throw Error(ErrorKind::Io, "container has no tensor '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
    nlohmann::json header = c.meta;
    header["format"] = "collapse-lab";
    header["version"] = kVersion;
    header["kind"] = c.kind;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : c.tensors) {
        header["tensors"].push_back(
            {{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()},
             {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.value.size()) * sizeof(double);
    }
    const std::string text = header.dump();
    const std::uint64_t length = text.size();

    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : c.tensors) {
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    char magic[8];
    std::uint64_t length = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    require(in && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::Io,
            path.string() + " is not a collapse-lab container");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    require(static_cast<bool>(in), ErrorKind::Io, "truncated header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Io, std::string("bad container header: ") + e.what());
    }
    require(header.value("version", 0) == kVersion, ErrorKind::Io, "unsupported version");

    Container c;
    c.kind = header.at("kind").get<std::string>();
    const std::streamoff payload = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.value.resize(entry.at("rows").get<Index>(), entry.at("cols").get<Index>());
        in.seekg(payload + entry.at("offset").get<std::streamoff>());
        in.read(reinterpret_cast<char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * sizeof(double)));
        require(static_cast<bool>(in), ErrorKind::Io, "truncated tensor " + t.name);
        c.tensors.push_back(std::move(t));
    }
    header.erase("format");
    header.erase("version");
    header.erase("kind");
    header.erase("tensors");
    c.meta = std::move(header);
    return c;
}

namespace {

template <class P>
Container params_container(const P& p, const char* kind) {
    Container c;
    c.kind = kind;
    c.meta["variant"] = std::string(to_string(p.variant));
    c.meta["placement"] = std::string(to_string(p.placement));
    c.meta["blocks"] = p.blocks.size();
    for (const auto& r : tensors(p)) {
        c.tensors.push_back({r.name, *r.tensor});
    }
    return c;
}

template <class P>
void fill_from(P& p, const Container& c) {
    std::map<std::string, const Matrix*> by_name;
    for (const auto& t : c.tensors) {
        by_name[t.name] = &t.value;
    }
    for (auto& r : tensors(p)) {
        auto it = by_name.find(r.name);
        require(it != by_name.end(), ErrorKind::Io, "container lacks tensor " + r.name);
        *r.tensor = *it->second;
        by_name.erase(it);
    }
    require(by_name.empty(), ErrorKind::Io, "container has unexpected tensors");
}

}  // namespace

Container to_container(const ResNetParams& p) { return params_container(p, "resnet"); }
Container to_container(const TransformerParams& p) {
    return params_container(p, "transformer");
}

ResNetParams resnet_from_container(const Container& c) {
    require(c.kind == "resnet", ErrorKind::Io, "container kind is " + c.kind + ", not resnet");
    ResNetParams p;
    p.variant = parse_variant(c.meta.at("variant").get<std::string>());
    p.placement = parse_placement(c.meta.at("placement").get<std::string>());
    const auto blocks = c.meta.at("blocks").get<std::size_t>();
    // Shapes are overwritten by fill_from; a non-empty placeholder marks
    // which optional tensors exist.
    const Matrix present = Matrix::Zero(1, 1);
    p.blocks.resize(blocks);
    for (std::size_t l = 0; l < blocks; ++l) {
        p.blocks[l].W1 = p.blocks[l].b1 = present;
        if (p.variant == Variant::rn2) {
            p.blocks[l].W2 = p.blocks[l].b2 = present;
        }
    }
    for (const auto& t : c.tensors) {
        if (t.name == "last_bias") {
            p.last_bias = present;
        }
    }
    fill_from(p, c);
    return p;
}

TransformerParams transformer_from_container(const Container& c) {
    require(c.kind == "transformer", ErrorKind::Io,
            "container kind is " + c.kind + ", not transformer");
    TransformerParams p;
    p.variant = parse_variant(c.meta.at("variant").get<std::string>());
    p.placement = parse_placement(c.meta.at("placement").get<std::string>());
    const auto blocks = c.meta.at("blocks").get<std::size_t>();
    for (std::size_t l = 0; l < blocks; ++l) {
        p.blocks.push_back(zero_transformer_block(p.variant, 1, 1));
    }
    for (const auto& t : c.tensors) {
        if (t.name == "b_last") {
            p.b_last = Matrix::Zero(1, 1);
        }
    }
    fill_from(p, c);
    return p;
}

}  // namespace collapse_lab::io
