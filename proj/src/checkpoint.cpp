#include "diffdti/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace diffdti {

namespace {

constexpr char kMagic[8] = {'D', 'D', 'T', 'I', 'A', 'R', 'C', '1'};

enum EntryKind : uint8_t { kTensor = 0, kString = 1, kScalar = 2 };

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void write_name(std::ostream& out, const std::string& name) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string read_name(std::istream& in) {
    const uint32_t len = read_pod<uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    return name;
}

} // namespace

void Archive::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write archive: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod<uint64_t>(out, tensors.size() + strings.size() + scalars.size());

    for (const auto& [name, t] : tensors) {
        write_name(out, name);
        write_pod<uint8_t>(out, kTensor);
        write_pod<int32_t>(out, t.n);
        write_pod<int32_t>(out, t.c);
        write_pod<int32_t>(out, t.h);
        write_pod<int32_t>(out, t.w);
        out.write(reinterpret_cast<const char*>(t.v.data()),
                  static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    }
    for (const auto& [name, s] : strings) {
        write_name(out, name);
        write_pod<uint8_t>(out, kString);
        write_pod<uint64_t>(out, s.size());
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    for (const auto& [name, v] : scalars) {
        write_name(out, name);
        write_pod<uint8_t>(out, kScalar);
        write_pod<uint64_t>(out, v);
    }
    if (!out) fail(ErrorKind::Io, "short write to archive: " + path);
}

Archive Archive::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open archive: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        fail(ErrorKind::Io, "not a checkpoint archive: " + path);

    Archive a;
    const uint64_t n = read_pod<uint64_t>(in);
    for (uint64_t i = 0; i < n; ++i) {
        const std::string name = read_name(in);
        const uint8_t kind = read_pod<uint8_t>(in);
        if (kind == kTensor) {
            const int32_t tn = read_pod<int32_t>(in);
            const int32_t tc = read_pod<int32_t>(in);
            const int32_t th = read_pod<int32_t>(in);
            const int32_t tw = read_pod<int32_t>(in);
            nn::Tensor t(tn, tc, th, tw);
            in.read(reinterpret_cast<char*>(t.v.data()),
                    static_cast<std::streamsize>(t.v.size() * sizeof(double)));
            a.tensors.emplace(name, std::move(t));
        } else if (kind == kString) {
            const uint64_t len = read_pod<uint64_t>(in);
            std::string s(len, '\0');
            in.read(s.data(), static_cast<std::streamsize>(len));
            a.strings.emplace(name, std::move(s));
        } else if (kind == kScalar) {
            a.scalars.emplace(name, read_pod<uint64_t>(in));
        } else {
            fail(ErrorKind::Io, "corrupt archive entry in " + path);
        }
        if (!in) fail(ErrorKind::Io, "truncated archive: " + path);
    }
    return a;
}

const nn::Tensor& Archive::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::Data, "archive: missing tensor " + name);
    return it->second;
}

const std::string& Archive::str(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) fail(ErrorKind::Data, "archive: missing string " + name);
    return it->second;
}

uint64_t Archive::scalar(const std::string& name) const {
    auto it = scalars.find(name);
    if (it == scalars.end()) fail(ErrorKind::Data, "archive: missing scalar " + name);
    return it->second;
}

} // namespace diffdti
