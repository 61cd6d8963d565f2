#include "dehaze/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dehaze/error.hpp"

namespace dehaze {
namespace {

constexpr char kMagic[8] = {'D', 'H', 'Z', 'A', 'R', 'C', 'H', '1'};

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
        return r;
    }
    return v;
}

void write_doubles(std::ostream& os, const Tensor& t) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        for (double v : t.vec()) {
            const std::uint64_t le = to_le(std::bit_cast<std::uint64_t>(v));
            os.write(reinterpret_cast<const char*>(&le), 8);
        }
    }
}

}  // namespace

const Tensor& Archive::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw InputError("archive has no tensor named " + name);
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    nlohmann::json header = archive.header;
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : archive.tensors) {
        const Shape s = t.shape();
        manifest.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"dtype", "f64"}, {"offset", offset}});
        offset += t.size() * sizeof(double);
    }
    header["tensors"] = manifest;
    header["payload_bytes"] = offset;
    const std::string text = header.dump();

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + path.string());
        os.write(kMagic, sizeof(kMagic));
        const std::uint64_t len = to_le(text.size());
        os.write(reinterpret_cast<const char*>(&len), 8);
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& entry : archive.tensors) write_doubles(os, entry.second);
        os.flush();
        if (!os) throw IoError("write failed for " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move archive into place at " + path.string() + ": " + ec.message());
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw InputError(path.string() + " is not a tensor archive");
    if (!is.read(reinterpret_cast<char*>(&len), 8)) throw InputError(path.string() + ": truncated header");
    len = to_le(len);
    if (len > (1ULL << 30)) throw InputError(path.string() + ": implausible header length");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw InputError(path.string() + ": truncated header");

    Archive a;
    try {
        a.header = nlohmann::json::parse(text);
        const std::uint64_t payload = a.header.at("payload_bytes").get<std::uint64_t>();
        std::vector<char> blob(payload);
        if (!is.read(blob.data(), static_cast<std::streamsize>(payload))) throw InputError(path.string() + ": truncated payload");
        for (const auto& entry : a.header.at("tensors")) {
            if (entry.at("dtype").get<std::string>() != "f64") throw InputError(path.string() + ": unsupported dtype");
            const auto dims = entry.at("shape").get<std::vector<int>>();
            if (dims.size() != 4) throw InputError(path.string() + ": tensor shape must have 4 dims");
            for (int d : dims) {
                if (d < 0) throw InputError(path.string() + ": negative dimension");
            }
            Tensor t(Shape{dims[0], dims[1], dims[2], dims[3]});
            const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
            const std::uint64_t bytes = t.size() * sizeof(double);
            if (off > payload || bytes > payload - off) throw InputError(path.string() + ": tensor outside payload");
            for (std::size_t i = 0; i < t.size(); ++i) {
                std::uint64_t bits;
                std::memcpy(&bits, blob.data() + off + i * 8, 8);
                t[i] = std::bit_cast<double>(to_le(bits));
            }
            a.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": malformed archive header: " + e.what());
    }
    a.header.erase("tensors");
    a.header.erase("payload_bytes");
    return a;
}

}  // namespace dehaze
