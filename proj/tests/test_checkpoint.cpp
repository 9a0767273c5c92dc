// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <limits>

#include <gtest/gtest.h>

#include "lalora/checkpoint.hpp"
#include "lalora/csv.hpp"
#include "lalora/errors.hpp"
#include "support.hpp"

namespace lalora {
namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

TEST(Crc32, StandardCheckValue) {
    EXPECT_EQ(crc32_of(bytes_of("123456789")), 0xCBF43926U);
    EXPECT_EQ(crc32_of({}), 0U);
}

TEST(TensorFile, AddAndTypedAccess) {
    TensorFile f;
    f.add_scalar("s", 2.5);
    f.add_vector("v", Vector{1, 2});
    f.add_matrix("m", Matrix{{1, 2, 3}, {4, 5, 6}});
    f.add_u64("u", std::numeric_limits<std::uint64_t>::max());
    EXPECT_DOUBLE_EQ(f.scalar("s"), 2.5);
    EXPECT_EQ(f.vector("v"), (Vector{1, 2}));
    EXPECT_EQ(f.matrix("m"), (Matrix{{1, 2, 3}, {4, 5, 6}}));
    EXPECT_EQ(f.u64("u"), std::numeric_limits<std::uint64_t>::max());
    EXPECT_THROW(f.scalar("v"), ValidationError);
    EXPECT_THROW(f.matrix("v"), ValidationError);
    EXPECT_THROW(f.vector("m"), ValidationError);
    EXPECT_THROW(f.u64("v2"), ValidationError);
    EXPECT_THROW(f.add_scalar("s", 1.0), ValidationError);
    EXPECT_THROW(f.add_scalar("", 1.0), ValidationError);
    EXPECT_THROW(f.add(Tensor{"bad", {3}, {1.0}}), ValidationError);
}

TEST(Container, ExactBytesForOneScalar) {
    TensorFile f;
    f.add_scalar("x", 1.0);
    const auto bytes = encode(f);
    std::vector<std::uint8_t> expected{'L', 'A', 'L', 'R', 1, 0, 1, 0, 0, 0, 1, 0, 'x', 0, 0};
    const std::uint8_t one[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
    expected.insert(expected.end(), one, one + 8);
    const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(expected).subspan(4));
    for (int i = 0; i < 4; ++i) {
        expected.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    }
    EXPECT_EQ(bytes, expected);
}

TEST(Container, RoundTripPreservesOrderAndBits) {
    TensorFile f;
    f.add_matrix("b", Matrix{{std::numeric_limits<double>::denorm_min(), -0.0}});
    f.add_scalar("a", std::numeric_limits<double>::quiet_NaN());
    f.add(Tensor{"empty", {0, 3}, {}});
    const TensorFile g = decode(encode(f));
    ASSERT_EQ(g.tensors().size(), 3U);
    EXPECT_EQ(g.tensors()[0].name, "b");
    EXPECT_EQ(g.tensors()[2].dims, (std::vector<std::uint64_t>{0, 3}));
    EXPECT_EQ(std::memcmp(g.tensors()[0].values.data(), f.tensors()[0].values.data(), 16), 0);
    EXPECT_TRUE(std::isnan(g.scalar("a")));
    EXPECT_EQ(encode(g), encode(f));
}

TEST(Container, CorruptionDetected) {
    TensorFile f;
    f.add_vector("v", Vector{1, 2, 3});
    const auto good = encode(f);
    for (std::size_t i = 4; i < good.size(); ++i) {
        auto bad = good;
        bad[i] ^= 0x01;
        EXPECT_THROW(decode(bad), IoError) << "byte " << i;
    }
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode(bad_magic), IoError);
    EXPECT_THROW(decode(std::span(good).first(good.size() - 1)), IoError);
    EXPECT_THROW(decode(std::span(good).first(8)), IoError);
}

// Rewrites the CRC so only the structural check can reject the payload.
std::vector<std::uint8_t> with_crc(std::vector<std::uint8_t> body_and_magic) {
    const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(body_and_magic).subspan(4));
    for (int i = 0; i < 4; ++i) {
        body_and_magic.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    }
    return body_and_magic;
}

TEST(Container, StructuralErrorsBehindValidCrc) {
    TensorFile f;
    f.add_scalar("x", 1.0);
    auto body = encode(f);
    body.resize(body.size() - 4);

    auto version = body;
    version[4] = 2;
    EXPECT_THROW(decode(with_crc(version)), IoError);

    auto trailing = body;
    trailing.push_back(0);
    EXPECT_THROW(decode(with_crc(trailing)), IoError);

    auto dtype = body;
    dtype[13] = 7;
    EXPECT_THROW(decode(with_crc(dtype)), IoError);

    auto huge = body;
    huge[14] = 1;  // one dimension
    const std::uint8_t big[8] = {0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0x0F};
    huge.insert(huge.begin() + 15, big, big + 8);
    EXPECT_THROW(decode(with_crc(huge)), IoError);

    auto duplicate = body;
    duplicate[6] = 2;
    duplicate.insert(duplicate.end(), body.begin() + 10, body.end());
    EXPECT_THROW(decode(with_crc(duplicate)), IoError);
}

TEST(Files, AtomicSaveAndErrors) {
    const auto dir = test::scratch_dir("checkpoint_files");
    TensorFile f;
    f.add_scalar("x", 3.0);
    save_tensors(dir / "a.lalr", f);
    EXPECT_DOUBLE_EQ(load_tensors(dir / "a.lalr").scalar("x"), 3.0);
    EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir), {}), 1);
    EXPECT_THROW(save_tensors(dir / "missing" / "a.lalr", f), IoError);
    EXPECT_THROW(load_tensors(dir / "nope.lalr"), IoError);
    write_text_atomic(dir / "t.txt", "junk");
    EXPECT_THROW(load_tensors(dir / "t.txt"), IoError);
}

TEST(NetworkTensors, RoundTripWithAdapters) {
    Network net = test::small_network(3);
    net.layers[0].lora->dropout_p = 0.25;
    TensorFile f;
    put_network(f, net);
    const Network back = get_network(decode(encode(f)));
    EXPECT_EQ(base_weights_hash(back), base_weights_hash(net));
    ASSERT_EQ(back.adapter_count(), 2U);
    EXPECT_EQ(back.layers[0].lora->a, net.layers[0].lora->a);
    EXPECT_EQ(back.layers[1].lora->b, net.layers[1].lora->b);
    EXPECT_EQ(back.layers[0].lora->rank, 2U);
    EXPECT_DOUBLE_EQ(back.layers[0].lora->dropout_p, 0.25);
    EXPECT_EQ(back.layers[1].activation, net.layers[1].activation);
    EXPECT_EQ(back.base_frozen, net.base_frozen);
}

TEST(NetworkTensors, RejectsInconsistentShapes) {
    const Network net = test::small_network(3);
    TensorFile f;
    put_network(f, net);
    TensorFile g;
    for (auto t : f.tensors()) {
        if (t.name == "net.L0.lora.b") {
            t.dims = {4, 2};
            t.values.resize(8);
        }
        if (t.name == "net.L1.activation") {
            t.values = {5.0};
        }
        g.add(t);
    }
    EXPECT_THROW(get_network(g), ValidationError);
    TensorFile missing;
    missing.add_scalar("net.num_classes", 3);
    EXPECT_THROW(get_network(missing), ValidationError);
}

TEST(PosteriorTensors, RoundTripEveryKind) {
    const Network net = test::small_network(4);
    CounterRng rng(4, 1);
    std::vector<CurvatureEstimate> kinds;
    {
        CurvatureEstimate d;
        d.kind = CurvatureKind::kDiag;
        std::vector<DiagFactors> ds;
        for (const auto* a : net.adapters()) {
            ds.push_back(DiagFactors{Vector(a->a.size(), 0.5), Vector(a->b.size(), 1.5)});
        }
        d.payload = ds;
        kinds.push_back(d);
    }
    for (bool cross : {false, true}) {
        CurvatureEstimate k;
        k.kind = cross ? CurvatureKind::kBlockTriKfac : CurvatureKind::kBlockKfac;
        std::vector<KfacFactors> fs;
        for (const auto* a : net.adapters()) {
            KfacFactors f{test::random_gram(rng, a->in_dim(), 6), test::random_gram(rng, a->rank, 3),
                          test::random_gram(rng, a->rank, 3), test::random_gram(rng, a->out_dim(), 6), std::nullopt,
                          std::nullopt};
            if (cross) {
                f.l01 = test::random_matrix(rng, a->in_dim(), a->rank);
                f.r12 = test::random_matrix(rng, a->rank, a->out_dim());
            }
            fs.push_back(f);
        }
        k.payload = fs;
        kinds.push_back(k);
    }
    kinds.push_back(identity_curvature());
    for (auto& c : kinds) {
        c.provenance = Provenance{{0, 1}, 2,
                                  {BatchDescriptor{0, 0, 0xFFFFFFFFFFFFULL}, BatchDescriptor{0, 1, 3},
                                   BatchDescriptor{1, 0, 4}, BatchDescriptor{1, 1, 5}}};
        const LaplacePosterior p = make_posterior(net, c);
        TensorFile f;
        put_posterior(f, p);
        const TensorFile g = decode(encode(f));
        const LaplacePosterior back = get_posterior(g);
        EXPECT_EQ(back.curvature.kind, c.kind);
        EXPECT_EQ(back.curvature.provenance.batches, c.provenance.batches);
        EXPECT_EQ(back.curvature.provenance.subdatasets, c.provenance.subdatasets);
        const Network moved = test::small_network(9);
        EXPECT_EQ(reg_value(back, moved), reg_value(p, moved)) << to_string(c.kind);
        for (std::size_t k = 0; k < net.adapter_count(); ++k) {
            const auto* a = net.adapters()[k];
            std::size_t expected = 0;
            if (c.kind == CurvatureKind::kDiag) {
                expected = a->parameter_count();
            } else if (c.kind != CurvatureKind::kIdentity) {
                expected = a->in_dim() * a->in_dim() + a->out_dim() * a->out_dim() + 2 * a->rank * a->rank;
                if (c.kind == CurvatureKind::kBlockTriKfac) {
                    expected += a->in_dim() * a->rank + a->rank * a->out_dim();
                }
            }
            EXPECT_EQ(stored_curvature_values(g, k), expected);
        }
    }
}

TEST(Csv, WriterQuotingAndLineEndings) {
    CsvWriter w({"a", "b"});
    w.row({"1", "x,y"});
    w.row({"he said \"hi\"", "line\nbreak"});
    EXPECT_EQ(w.text(), "a,b\r\n1,\"x,y\"\r\n\"he said \"\"hi\"\"\",\"line\nbreak\"\r\n");
    EXPECT_EQ(w.rows(), 2U);
    EXPECT_THROW(w.row({"only one"}), ValidationError);
    EXPECT_THROW(CsvWriter({}), ValidationError);
}

TEST(Csv, ParserInvertsWriter) {
    CsvWriter w({"k", "v"});
    w.row({"", "a\r\nb"});
    w.row({"\"", ","});
    const auto rows = parse_csv(w.text());
    ASSERT_EQ(rows.size(), 3U);
    EXPECT_EQ(rows[1], (std::vector<std::string>{"", "a\r\nb"}));
    EXPECT_EQ(rows[2], (std::vector<std::string>{"\"", ","}));
    EXPECT_EQ(parse_csv("x,y"), (std::vector<std::vector<std::string>>{{"x", "y"}}));
    EXPECT_THROW(parse_csv("\"open"), ValidationError);
}

TEST(Csv, FormatReal) {
    EXPECT_EQ(format_real(0.1), "0.1");
    EXPECT_EQ(format_real(1.0 / 3.0), "0.3333333333");
    EXPECT_EQ(format_real(1e6), "1000000");
    EXPECT_EQ(format_real(1.5e-12), "1.5e-12");
    EXPECT_EQ(format_real(-2.0), "-2");
}

}  // namespace
}  // namespace lalora
