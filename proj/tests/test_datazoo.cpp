#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "softmerge/datazoo.hpp"
#include "softmerge/trainer.hpp"

using namespace softmerge;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("softmerge_datazoo_" + name);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// n images of rows x cols, pixel (i, k) = (i + k) % 256; label i % 10.
void write_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels, std::uint32_t n,
                    std::uint32_t rows, std::uint32_t cols, std::uint32_t label_count) {
    std::vector<std::uint8_t> ib;
    put_be32(ib, 0x00000803);
    put_be32(ib, n);
    put_be32(ib, rows);
    put_be32(ib, cols);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t k = 0; k < rows * cols; ++k) ib.push_back(static_cast<std::uint8_t>((i + k) % 256));
    std::vector<std::uint8_t> lb;
    put_be32(lb, 0x00000801);
    put_be32(lb, label_count);
    for (std::uint32_t i = 0; i < label_count; ++i) lb.push_back(static_cast<std::uint8_t>(i % 10));
    write_bytes(images, ib);
    write_bytes(labels, lb);
}

}  // namespace

TEST(GenBlobs, TwoClassesLinearlySeparableByClosedFormProbe) {
    const auto d = gen_blobs(2, 4, 2000, 10.0, 7);
    // Centers are (10/sqrt 2) e_0 and (10/sqrt 2) e_1; the Bayes rule compares x_0 and x_1.
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::size_t pred = d.features.at(i, 0) > d.features.at(i, 1) ? 0 : 1;
        correct += pred == d.labels[i];
    }
    EXPECT_GE(correct / double(d.size()), 0.99);
}

TEST(GenBlobs, SeededAndBalanced) {
    const auto a = gen_blobs(3, 5, 300, 4.0, 1);
    const auto b = gen_blobs(3, 5, 300, 4.0, 1);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(gen_blobs(3, 5, 300, 4.0, 2).features, a.features);
    std::map<std::size_t, int> counts;
    for (auto l : a.labels) ++counts[l];
    EXPECT_EQ(counts, (std::map<std::size_t, int>{{0, 100}, {1, 100}, {2, 100}}));
    EXPECT_EQ(a.classes, 3u);
}

TEST(GenBlobs, MoreClassesThanDims) {
    const auto d = gen_blobs(5, 2, 50, 6.0, 3);
    EXPECT_EQ(d.features.shape(), (Shape{50, 2}));
    EXPECT_THROW(gen_blobs(1, 2, 50, 6.0, 3), DatasetError);
    EXPECT_THROW(gen_blobs(4, 2, 3, 6.0, 3), DatasetError);
}

TEST(GenTwoMoons, BalancedAndSeeded) {
    const auto a = gen_two_moons(101, 0.1, 4);
    EXPECT_EQ(a.features, gen_two_moons(101, 0.1, 4).features);
    std::size_t ones = 0;
    for (auto l : a.labels) ones += l;
    EXPECT_EQ(ones, 50u);
}

TEST(LoadIdx, ParsesAndScales) {
    const auto ip = temp_path("img.idx"), lp = temp_path("lab.idx");
    write_idx_pair(ip, lp, 20, 3, 2, 20);
    const auto d = load_idx(ip, lp);
    EXPECT_EQ(d.size(), 20u);
    EXPECT_EQ(d.features.shape(), (Shape{20, 6}));
    EXPECT_DOUBLE_EQ(d.features.at(3, 2), 5.0 / 255.0);
    EXPECT_EQ(d.labels[13], 3u);
    EXPECT_EQ(d.classes, 10u);
    EXPECT_EQ(load_idx(ip, lp, 7).size(), 7u);
}

TEST(LoadIdx, StandardTrainHeader) {
    const std::vector<std::uint8_t> header{0, 0, 8, 3, 0, 0, 0xEA, 0x60, 0, 0, 0, 0x1C, 0, 0, 0, 0x1C};
    const auto h = read_idx_header(header);
    EXPECT_EQ(h.magic, kIdxImagesMagic);
    EXPECT_EQ(h.dims, (std::vector<std::uint32_t>{60000, 28, 28}));
    EXPECT_EQ(h.data_offset, 16u);
}

TEST(LoadIdx, Errors) {
    const auto ip = temp_path("img2.idx"), lp = temp_path("lab2.idx");
    write_idx_pair(ip, lp, 10, 2, 2, 9);
    EXPECT_THROW(load_idx(ip, lp), DatasetError);
    write_idx_pair(ip, lp, 10, 2, 2, 10);
    try {
        load_idx(lp, ip);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::BadMagic);
    }
    std::vector<std::uint8_t> truncated;
    put_be32(truncated, 0x00000803);
    put_be32(truncated, 10);
    put_be32(truncated, 2);
    put_be32(truncated, 2);
    write_bytes(ip, truncated);
    try {
        load_idx(ip, lp);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::Truncated);
    }
}

TEST(TrainBaseModel, ReachesHighAccuracyOnBlobs) {
    // Centers 8 apart: Bayes error is about 3 * Phi(-4), well under 5%.
    const auto train = gen_blobs(4, 6, 800, 8.0, 10);
    const auto val = gen_blobs(4, 6, 400, 8.0, 11);
    const auto arch = mlp_architecture(6, {16}, 4);
    const auto model = train_base_model(arch, train, 5, {50, 0.05, 32});
    EXPECT_GE(evaluate(model, val).accuracy, 0.95);
}

TEST(TrainBaseModel, ZeroEpochsReturnsInitialization) {
    const auto train = gen_blobs(4, 6, 200, 4.0, 10);
    const auto arch = mlp_architecture(6, {16}, 4);
    auto expected = arch;
    Rng rng(5);
    initialize_weights(expected, rng);
    EXPECT_EQ(train_base_model(arch, train, 5, {0, 0.05, 32}), expected);
}

TEST(TrainBaseModel, SeedsGiveDifferentWeights) {
    const auto train = gen_blobs(2, 3, 100, 4.0, 10);
    const auto arch = mlp_architecture(3, {8}, 2);
    EXPECT_NE(weight_checksum(train_base_model(arch, train, 1, {2, 0.05, 32})),
              weight_checksum(train_base_model(arch, train, 2, {2, 0.05, 32})));
}

TEST(CorruptModel, RandomizeIsChanceOnAverage) {
    const auto train = gen_blobs(2, 4, 400, 4.0, 20);
    const auto val = gen_blobs(2, 4, 400, 4.0, 21);
    const auto model = train_base_model(mlp_architecture(4, {16}, 2), train, 1, {20, 0.05, 32});
    ASSERT_GE(evaluate(model, val).accuracy, 0.95);
    double mean = 0.0;
    const int seeds = 40;
    for (int s = 0; s < seeds; ++s) {
        const auto bad = corrupt_model(model, {CorruptionMode::Randomize}, s);
        EXPECT_EQ(bad.fingerprint(), model.fingerprint());
        mean += evaluate(bad, val).accuracy / seeds;
    }
    EXPECT_GE(mean, 0.4);
    EXPECT_LE(mean, 0.6);
}

TEST(CorruptModel, ExtremeScalesEveryWeight) {
    Rng rng(1);
    auto model = mlp_architecture(3, {4}, 2);
    initialize_weights(model, rng);
    const auto bad = corrupt_model(model, {CorruptionMode::Extreme, 1e6}, 0);
    EXPECT_EQ(bad.fingerprint(), model.fingerprint());
    EXPECT_DOUBLE_EQ(bad.layer(0).weight[3], model.layer(0).weight[3] * 1e6);
    EXPECT_THROW(corrupt_model(model, {CorruptionMode::Extreme, 0.0}, 0), std::invalid_argument);
    const Tensor x({1, 3}, {1, 1, 1});
    const auto out = forward(bad, x);
    double mx = 0.0;
    for (double v : out.data()) mx = std::max(mx, std::abs(v));
    EXPECT_TRUE(!std::isfinite(mx) || mx > 1e6);
}
