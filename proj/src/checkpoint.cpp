#include "dvfa/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dvfa::ckpt {

namespace {

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ofstream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_doubles(std::ofstream& out, const std::vector<real>& v, bool float32) {
    if (float32) {
        for (real x : v) put<float>(out, static_cast<float>(x));
    } else {
        for (real x : v) put<double>(out, static_cast<double>(x));
    }
}

template <typename T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
}

std::string get_string(std::ifstream& in) {
    const auto n = get<std::uint64_t>(in);
    if (n > (1ull << 32)) throw DataError("checkpoint: implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw DataError("checkpoint: truncated file");
    return s;
}

std::vector<real> get_doubles(std::ifstream& in, std::size_t count, bool float32) {
    std::vector<real> v(count);
    if (float32) {
        for (auto& x : v) x = static_cast<real>(get<float>(in));
    } else {
        for (auto& x : v) x = static_cast<real>(get<double>(in));
    }
    return v;
}

}  // namespace

void save(const std::string& path, const nn::ParamStore& store, const std::string& meta_json,
          const ag::AdamW* optimizer, bool float32_storage) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    put_string(out, meta_json);
    put<std::uint8_t>(out, float32_storage ? 1 : 0);
    put<std::uint64_t>(out, store.params.size());
    for (const auto& [name, tensor] : store.params) {
        put_string(out, name);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor->shape.size()));
        for (auto d : tensor->shape) put<std::int64_t>(out, d);
        put_doubles(out, tensor->val, float32_storage);
    }
    put<std::uint8_t>(out, optimizer ? 1 : 0);
    if (optimizer) {
        put<double>(out, static_cast<double>(optimizer->lr));
        put<double>(out, static_cast<double>(optimizer->beta1));
        put<double>(out, static_cast<double>(optimizer->beta2));
        put<double>(out, static_cast<double>(optimizer->eps));
        put<double>(out, static_cast<double>(optimizer->weight_decay));
        put<std::int64_t>(out, optimizer->step_count);
        put<std::uint64_t>(out, optimizer->m.size());
        for (const auto& [name, m] : optimizer->m) {
            put_string(out, name);
            put<std::uint64_t>(out, m.size());
            put_doubles(out, m, false);
            auto it = optimizer->v.find(name);
            if (it == optimizer->v.end() || it->second.size() != m.size())
                throw ModelError("checkpoint: optimizer state mismatch for " + name);
            put_doubles(out, it->second, false);
        }
    }
    if (!out) throw DataError("checkpoint: write failed for " + path);
}

Loaded load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const auto version = get<std::uint32_t>(in);
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    Loaded loaded;
    loaded.meta = get_string(in);
    const bool float32 = get<std::uint8_t>(in) != 0;
    const auto n_params = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < n_params; ++i) {
        const std::string name = get_string(in);
        const auto ndims = get<std::uint8_t>(in);
        std::vector<std::int64_t> shape(ndims);
        std::int64_t count = 1;
        for (auto& d : shape) {
            d = get<std::int64_t>(in);
            if (d < 1 || d > (1ll << 32)) throw DataError("checkpoint: bad dimension");
            count *= d;
        }
        loaded.params[name] = {std::move(shape),
                               get_doubles(in, static_cast<std::size_t>(count), float32)};
    }
    loaded.has_optimizer = get<std::uint8_t>(in) != 0;
    if (loaded.has_optimizer) {
        auto& opt = loaded.optimizer;
        opt.lr = static_cast<real>(get<double>(in));
        opt.beta1 = static_cast<real>(get<double>(in));
        opt.beta2 = static_cast<real>(get<double>(in));
        opt.eps = static_cast<real>(get<double>(in));
        opt.weight_decay = static_cast<real>(get<double>(in));
        opt.step_count = get<std::int64_t>(in);
        const auto n = get<std::uint64_t>(in);
        for (std::uint64_t i = 0; i < n; ++i) {
            const std::string name = get_string(in);
            const auto count = get<std::uint64_t>(in);
            opt.m[name] = get_doubles(in, static_cast<std::size_t>(count), false);
            opt.v[name] = get_doubles(in, static_cast<std::size_t>(count), false);
        }
    }
    return loaded;
}

void apply(const Loaded& loaded, nn::ParamStore& store) {
    if (loaded.params.size() != store.params.size())
        throw ModelError("checkpoint: parameter count mismatch (" +
                         std::to_string(loaded.params.size()) + " stored, " +
                         std::to_string(store.params.size()) + " expected)");
    for (auto& [name, tensor] : store.params) {
        auto it = loaded.params.find(name);
        if (it == loaded.params.end())
            throw ModelError("checkpoint: missing parameter " + name);
        if (it->second.first != tensor->shape)
            throw ModelError("checkpoint: shape mismatch for " + name);
        tensor->val = it->second.second;
    }
}

}  // namespace dvfa::ckpt
