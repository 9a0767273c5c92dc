// SPDX-License-Identifier: Apache-2.0
#include "lalora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <zlib.h>

#include "lalora/errors.hpp"

namespace lalora {

std::size_t Tensor::element_count() const noexcept {
    std::size_t n = 1;
    for (auto d : dims) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void TensorFile::add(Tensor tensor) {
    if (tensor.name.empty() || tensor.name.size() > 0xFFFF) {
        throw ValidationError("tensor name must have 1..65535 bytes");
    }
    if (contains(tensor.name)) {
        throw ValidationError(fmt::format("duplicate tensor '{}'", tensor.name));
    }
    if (tensor.dims.size() > 0xFF || tensor.element_count() != tensor.values.size()) {
        throw ValidationError(fmt::format("tensor '{}' dims do not match its payload", tensor.name));
    }
    tensors_.push_back(std::move(tensor));
}

void TensorFile::add_scalar(std::string name, double value) { add(Tensor{std::move(name), {}, {value}}); }

void TensorFile::add_matrix(std::string name, const Matrix& m) {
    add(Tensor{std::move(name), {m.rows(), m.cols()}, {m.data().begin(), m.data().end()}});
}

void TensorFile::add_vector(std::string name, std::span<const double> v) {
    add(Tensor{std::move(name), {v.size()}, {v.begin(), v.end()}});
}

void TensorFile::add_u64(std::string name, std::uint64_t value) {
    add(Tensor{std::move(name), {2}, {static_cast<double>(value >> 32), static_cast<double>(value & 0xFFFFFFFFULL)}});
}

bool TensorFile::contains(std::string_view name) const noexcept {
    return std::any_of(tensors_.begin(), tensors_.end(), [&](const Tensor& t) { return t.name == name; });
}

const Tensor& TensorFile::get(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return t;
        }
    }
    throw ValidationError(fmt::format("checkpoint has no tensor '{}'", name));
}

double TensorFile::scalar(std::string_view name) const {
    const Tensor& t = get(name);
    if (!t.dims.empty()) {
        throw ValidationError(fmt::format("tensor '{}' is not a scalar", name));
    }
    return t.values.front();
}

Matrix TensorFile::matrix(std::string_view name) const {
    const Tensor& t = get(name);
    if (t.dims.size() != 2) {
        throw ValidationError(fmt::format("tensor '{}' is not a matrix", name));
    }
    return Matrix(t.dims[0], t.dims[1], t.values);
}

Vector TensorFile::vector(std::string_view name) const {
    const Tensor& t = get(name);
    if (t.dims.size() != 1) {
        throw ValidationError(fmt::format("tensor '{}' is not a vector", name));
    }
    return t.values;
}

std::uint64_t TensorFile::u64(std::string_view name) const {
    const Vector v = vector(name);
    if (v.size() != 2) {
        throw ValidationError(fmt::format("tensor '{}' is not a split u64", name));
    }
    return (static_cast<std::uint64_t>(v[0]) << 32) | static_cast<std::uint64_t>(v[1]);
}

namespace {

constexpr std::uint8_t kMagic[4] = {0x4C, 0x41, 0x4C, 0x52};
constexpr std::uint8_t kDtypeF64 = 0;

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename T>
    void le(T value) {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                        std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
        U u = 0;
        std::memcpy(&u, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
        }
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
    template <typename T>
    T le() {
        need(sizeof(T));
        std::uint64_t u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            u |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(T);
        T value;
        if constexpr (sizeof(T) == 8) {
            std::memcpy(&value, &u, 8);
        } else {
            value = static_cast<T>(u);
        }
        return value;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    [[nodiscard]] std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > in_.size() - pos_) {
            throw IoError("checkpoint truncated");
        }
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, bytes.data() + pos, chunk);
        pos += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode(const TensorFile& file) {
    Writer w;
    w.bytes(kMagic, 4);
    w.le<std::uint16_t>(kCheckpointVersion);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(file.tensors().size()));
    for (const auto& t : file.tensors()) {
        w.le<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.le<std::uint8_t>(kDtypeF64);
        w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) {
            w.le<std::uint64_t>(d);
        }
        for (double v : t.values) {
            w.le<double>(v);
        }
    }
    auto& out = w.data();
    const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(out).subspan(4));
    w.le<std::uint32_t>(crc);
    return std::move(out);
}

TensorFile decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 2 + 4 + 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
        throw IoError("not a checkpoint (bad magic)");
    }
    const auto body = bytes.subspan(4, bytes.size() - 8);
    Reader crc_reader(bytes.subspan(bytes.size() - 4));
    if (crc_reader.le<std::uint32_t>() != crc32_of(body)) {
        throw IoError("checkpoint CRC mismatch");
    }
    Reader r(body);
    const auto version = r.le<std::uint16_t>();
    if (version != kCheckpointVersion) {
        throw IoError(fmt::format("unsupported checkpoint version {}", version));
    }
    const auto count = r.le<std::uint32_t>();
    TensorFile file;
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor t;
        t.name = r.str(r.le<std::uint16_t>());
        if (r.le<std::uint8_t>() != kDtypeF64) {
            throw IoError(fmt::format("tensor '{}' has an unknown dtype", t.name));
        }
        const auto ndim = r.le<std::uint8_t>();
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            t.dims.push_back(r.le<std::uint64_t>());
            if (t.dims.back() != 0 && n > r.remaining() / t.dims.back()) {
                throw IoError(fmt::format("tensor '{}' is larger than the file", t.name));
            }
            n *= static_cast<std::size_t>(t.dims.back());
        }
        if (n > r.remaining() / 8) {
            throw IoError(fmt::format("tensor '{}' is larger than the file", t.name));
        }
        t.values.resize(n);
        for (auto& v : t.values) {
            v = r.le<double>();
        }
        try {
            file.add(std::move(t));
        } catch (const ValidationError& e) {
            throw IoError(e.what());
        }
    }
    if (r.remaining() != 0) {
        throw IoError("trailing bytes after the last tensor");
    }
    return file;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    const auto parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::error_code ec;
    if (!std::filesystem::is_directory(parent, ec)) {
        throw IoError(fmt::format("output directory '{}' does not exist", parent.string()));
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError(fmt::format("cannot write '{}'", tmp.string()));
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError(fmt::format("write failed for '{}'", tmp.string()));
        }
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError(fmt::format("cannot rename onto '{}'", path.string()));
    }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot read '{}'", path.string()));
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_tensors(const std::filesystem::path& path, const TensorFile& file) {
    write_file_atomic(path, encode(file));
}

TensorFile load_tensors(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode(bytes);
    } catch (const IoError& e) {
        throw IoError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

namespace {

std::string layer_key(std::size_t i, std::string_view field) { return fmt::format("net.L{}.{}", i, field); }
std::string adapter_key(std::size_t i, std::string_view field) { return fmt::format("post.A{}.{}", i, field); }

std::size_t as_index(double v, std::string_view what) {
    if (!(v >= 0.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw ValidationError(fmt::format("checkpoint field '{}' is not a count", what));
    }
    return static_cast<std::size_t>(v);
}

}  // namespace

void put_network(TensorFile& file, const Network& network) {
    file.add_scalar("net.num_classes", static_cast<double>(network.num_classes));
    file.add_scalar("net.layer_count", static_cast<double>(network.layers.size()));
    file.add_scalar("net.base_frozen", network.base_frozen ? 1.0 : 0.0);
    for (std::size_t i = 0; i < network.layers.size(); ++i) {
        const auto& l = network.layers[i];
        file.add_matrix(layer_key(i, "weight"), l.weight);
        file.add_vector(layer_key(i, "bias"), l.bias);
        file.add_scalar(layer_key(i, "activation"), static_cast<double>(l.activation));
        if (l.lora) {
            file.add_matrix(layer_key(i, "lora.a"), l.lora->a);
            file.add_matrix(layer_key(i, "lora.b"), l.lora->b);
            file.add_scalar(layer_key(i, "lora.alpha"), l.lora->alpha);
            file.add_scalar(layer_key(i, "lora.dropout_p"), l.lora->dropout_p);
        }
    }
}

Network get_network(const TensorFile& file) {
    Network net;
    net.num_classes = as_index(file.scalar("net.num_classes"), "net.num_classes");
    net.base_frozen = file.scalar("net.base_frozen") != 0.0;
    const std::size_t layers = as_index(file.scalar("net.layer_count"), "net.layer_count");
    for (std::size_t i = 0; i < layers; ++i) {
        LinearLayer l;
        l.weight = file.matrix(layer_key(i, "weight"));
        l.bias = file.vector(layer_key(i, "bias"));
        const std::size_t act = as_index(file.scalar(layer_key(i, "activation")), "activation");
        if (act > 1) {
            throw ValidationError(fmt::format("layer {} has an unknown activation", i));
        }
        l.activation = static_cast<Activation>(act);
        if (file.contains(layer_key(i, "lora.a"))) {
            LoraAdapter ad;
            ad.a = file.matrix(layer_key(i, "lora.a"));
            ad.b = file.matrix(layer_key(i, "lora.b"));
            ad.rank = ad.a.rows();
            ad.alpha = file.scalar(layer_key(i, "lora.alpha"));
            ad.dropout_p = file.scalar(layer_key(i, "lora.dropout_p"));
            if (ad.b.cols() != ad.rank || ad.a.cols() != l.weight.cols() || ad.b.rows() != l.weight.rows()) {
                throw ValidationError(fmt::format("layer {} adapter shape mismatch", i));
            }
            l.lora = std::move(ad);
        }
        net.layers.push_back(std::move(l));
    }
    net.validate();
    return net;
}

void put_posterior(TensorFile& file, const LaplacePosterior& posterior) {
    const auto& cur = posterior.curvature;
    file.add_scalar("post.kind", static_cast<double>(cur.kind));
    file.add_scalar("post.adapter_count", static_cast<double>(posterior.means.size()));
    for (std::size_t i = 0; i < posterior.means.size(); ++i) {
        file.add_matrix(adapter_key(i, "mu_a"), posterior.means[i].a);
        file.add_matrix(adapter_key(i, "mu_b"), posterior.means[i].b);
        if (cur.kind == CurvatureKind::kDiag) {
            file.add_vector(adapter_key(i, "d_a"), cur.diag()[i].d_a);
            file.add_vector(adapter_key(i, "d_b"), cur.diag()[i].d_b);
        } else if (cur.kind != CurvatureKind::kIdentity) {
            const auto& f = cur.kfac()[i];
            file.add_matrix(adapter_key(i, "l00"), f.l00);
            file.add_matrix(adapter_key(i, "r11"), f.r11);
            file.add_matrix(adapter_key(i, "l11"), f.l11);
            file.add_matrix(adapter_key(i, "r22"), f.r22);
            if (f.has_cross()) {
                file.add_matrix(adapter_key(i, "l01"), *f.l01);
                file.add_matrix(adapter_key(i, "r12"), *f.r12);
            }
        }
    }
    const auto& prov = cur.provenance;
    Tensor table{"post.provenance", {prov.batches.size(), 4}, {}};
    for (const auto& b : prov.batches) {
        table.values.insert(table.values.end(), {static_cast<double>(b.subdataset), static_cast<double>(b.batch_index),
                                                 static_cast<double>(b.seed >> 32),
                                                 static_cast<double>(b.seed & 0xFFFFFFFFULL)});
    }
    file.add(std::move(table));
    Vector subs(prov.subdatasets.begin(), prov.subdatasets.end());
    file.add_vector("post.subdatasets", subs);
    file.add_scalar("post.batches_per_subdataset", static_cast<double>(prov.batches_per_subdataset));
}

LaplacePosterior get_posterior(const TensorFile& file) {
    LaplacePosterior post;
    const std::size_t kind = as_index(file.scalar("post.kind"), "post.kind");
    if (kind > static_cast<std::size_t>(CurvatureKind::kIdentity)) {
        throw ValidationError("checkpoint has an unknown curvature kind");
    }
    post.curvature.kind = static_cast<CurvatureKind>(kind);
    const std::size_t n = as_index(file.scalar("post.adapter_count"), "post.adapter_count");
    std::vector<DiagFactors> diag;
    std::vector<KfacFactors> kfac;
    for (std::size_t i = 0; i < n; ++i) {
        post.means.push_back(AdapterPair{file.matrix(adapter_key(i, "mu_a")), file.matrix(adapter_key(i, "mu_b"))});
        switch (post.curvature.kind) {
            case CurvatureKind::kDiag:
                diag.push_back(DiagFactors{file.vector(adapter_key(i, "d_a")), file.vector(adapter_key(i, "d_b"))});
                break;
            case CurvatureKind::kBlockKfac:
            case CurvatureKind::kBlockTriKfac: {
                KfacFactors f{file.matrix(adapter_key(i, "l00")), file.matrix(adapter_key(i, "r11")),
                              file.matrix(adapter_key(i, "l11")), file.matrix(adapter_key(i, "r22")), std::nullopt,
                              std::nullopt};
                if (post.curvature.kind == CurvatureKind::kBlockTriKfac) {
                    f.l01 = file.matrix(adapter_key(i, "l01"));
                    f.r12 = file.matrix(adapter_key(i, "r12"));
                }
                kfac.push_back(std::move(f));
                break;
            }
            case CurvatureKind::kIdentity:
                break;
        }
    }
    if (post.curvature.kind == CurvatureKind::kDiag) {
        post.curvature.payload = std::move(diag);
    } else if (post.curvature.kind != CurvatureKind::kIdentity) {
        post.curvature.payload = std::move(kfac);
    }
    const Tensor& table = file.get("post.provenance");
    if (table.dims.size() != 2 || table.dims[1] != 4) {
        throw ValidationError("post.provenance must be an n×4 table");
    }
    auto& prov = post.curvature.provenance;
    for (std::size_t r = 0; r < table.dims[0]; ++r) {
        const double* row = table.values.data() + 4 * r;
        prov.batches.push_back(BatchDescriptor{
            static_cast<std::uint32_t>(row[0]), static_cast<std::uint32_t>(row[1]),
            (static_cast<std::uint64_t>(row[2]) << 32) | static_cast<std::uint64_t>(row[3])});
    }
    for (double s : file.vector("post.subdatasets")) {
        prov.subdatasets.push_back(static_cast<std::uint32_t>(s));
    }
    prov.batches_per_subdataset =
        as_index(file.scalar("post.batches_per_subdataset"), "post.batches_per_subdataset");
    post.curvature.validate();
    post.check_compatible(post.means);
    return post;
}

std::size_t stored_curvature_values(const TensorFile& file, std::size_t adapter) {
    std::size_t total = 0;
    for (const char* field : {"d_a", "d_b", "l00", "r11", "l11", "r22", "l01", "r12"}) {
        const std::string key = adapter_key(adapter, field);
        if (file.contains(key)) {
            total += file.get(key).element_count();
        }
    }
    return total;
}

}  // namespace lalora
