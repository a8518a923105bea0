#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "saml/synthdata.hpp"

namespace fs = std::filesystem;
using saml::DomainSpec;
using saml::Image;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("saml_synth_" + name);
    fs::remove_all(p);
    return p;
}

DomainSpec identity_spec() { return DomainSpec{5, 1.0, 0.0, 1.0, 0.0, 0, 0.0, 0.0}; }

double mean_of(const Image& img) {
    double m = 0;
    for (float v : img.data) m += v;
    return m / img.size();
}

double var_of(const Image& img) {
    const double m = mean_of(img);
    double s = 0;
    for (float v : img.data) s += (v - m) * (v - m);
    return s / img.size();
}

}  // namespace

TEST(SynthData, SameSeedIsBitwiseIdentical) {
    const auto spec = saml::default_domain_specs()[2];
    EXPECT_EQ(saml::generate_domain(spec, 6, 32, 32, 11), saml::generate_domain(spec, 6, 32, 32, 11));
    EXPECT_NE(saml::generate_domain(spec, 6, 32, 32, 11), saml::generate_domain(spec, 6, 32, 32, 12));
}

TEST(SynthData, IdentityPipelineGivesCleanRendering) {
    const auto d = saml::generate_domain(identity_spec(), 4, 32, 32, 3);
    for (const auto& s : d.samples) EXPECT_EQ(s.image, saml::render_clean(s.mask));
}

TEST(SynthData, MasksAreConnectedWithBoundedCoverage) {
    for (const auto& spec : saml::default_domain_specs()) {
        const auto d = saml::generate_domain(spec, 250, 64, 64, 2024);
        for (const auto& s : d.samples) {
            const double c = saml::coverage(s.mask);
            ASSERT_GE(c, 0.05);
            ASSERT_LE(c, 0.60);
            ASSERT_EQ(saml::connected_components(s.mask), 1u);
        }
    }
}

TEST(SynthData, GenerationIsOrderIndependent) {
    const auto spec = saml::default_domain_specs()[1];
    const auto d = saml::generate_domain(spec, 8, 32, 32, 5);
    for (int i : {7, 0, 3}) EXPECT_EQ(saml::generate_sample(spec, i, 32, 32, 5), d.samples[i]);
}

TEST(SynthData, DomainsLookDifferent) {
    const auto specs = saml::default_domain_specs();
    const auto a = saml::generate_domain(specs[0], 1, 32, 32, 5), b = saml::generate_domain(specs[2], 1, 32, 32, 5);
    EXPECT_NE(a.samples[0].mask, b.samples[0].mask) << "each domain draws its own anatomy";
    EXPECT_NE(saml::render_clean(a.samples[0].mask), a.samples[0].image);
    EXPECT_NE(saml::render_clean(b.samples[0].mask), b.samples[0].image);
}

TEST(SynthData, InvalidSpecsRejected) {
    DomainSpec s = identity_spec();
    s.gamma = 0;
    EXPECT_THROW(saml::generate_domain(s, 1, 32, 32, 1), saml::ConfigError);
    s = identity_spec();
    s.noise_sigma = -1;
    EXPECT_THROW(saml::generate_domain(s, 1, 32, 32, 1), saml::ConfigError);
    auto specs = saml::default_domain_specs();
    specs[1].id = specs[0].id;
    EXPECT_THROW(saml::generate_dataset(specs, 1, 32, 32, 1), saml::ConfigError);
}

TEST(Preprocess, ZeroMeanUnitVariance) {
    const auto d = saml::generate_domain(saml::default_domain_specs()[3], 5, 32, 32, 8);
    for (const auto& s : d.samples) {
        Image p = saml::preprocess(s.image);
        EXPECT_NEAR(mean_of(p), 0.0, 1e-5);
        EXPECT_NEAR(var_of(p), 1.0, 1e-4);
    }
}

TEST(Preprocess, AffineInvariant) {
    const auto d = saml::generate_domain(saml::default_domain_specs()[0], 1, 32, 32, 8);
    Image x = d.samples[0].image, y = x;
    for (auto& v : y.data) v = 3.0f * v + 2.0f;
    Image px = saml::preprocess(x), py = saml::preprocess(y);
    for (std::size_t i = 0; i < px.size(); ++i) EXPECT_NEAR(px.data[i], py.data[i], 1e-5);
}

TEST(Preprocess, ConstantImageRejected) { EXPECT_THROW(saml::preprocess(Image(8, 8, 0.3f)), saml::Error); }

TEST(DatasetFiles, RoundTripIsBitwise) {
    const auto specs = saml::default_domain_specs();
    const auto ds = saml::generate_dataset({specs[0], specs[1], specs[2]}, 3, 16, 16, 9);
    const auto dir = scratch_dir("roundtrip");
    saml::save_dataset(ds, dir);
    EXPECT_TRUE(fs::exists(dir / "domain_1" / "sample_2.img"));
    EXPECT_TRUE(fs::exists(dir / "domain_1" / "sample_2.msk"));
    EXPECT_EQ(saml::load_dataset(dir), ds);
    fs::remove_all(dir);
}

TEST(DatasetFiles, CorruptedPayloadFailsChecksum) {
    const auto ds = saml::generate_dataset(saml::default_domain_specs(), 2, 16, 16, 9);
    const auto dir = scratch_dir("corrupt");
    saml::save_dataset(ds, dir);
    const auto victim = dir / "domain_2" / "sample_1.img";
    std::string bytes = saml::read_file(victim);
    bytes[17] ^= 0x40;
    saml::write_file_atomic(victim, bytes);
    try {
        saml::load_dataset(dir);
        FAIL() << "expected checksum error";
    } catch (const saml::IoError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
    fs::remove_all(dir);
}

TEST(DatasetFiles, TruncatedPayloadDetected) {
    const auto ds = saml::generate_dataset(saml::default_domain_specs(), 2, 16, 16, 9);
    const auto dir = scratch_dir("truncated");
    saml::save_dataset(ds, dir);
    const auto victim = dir / "domain_0" / "sample_0.msk";
    saml::write_file_atomic(victim, saml::read_file(victim).substr(0, 100));
    EXPECT_THROW(saml::load_dataset(dir), saml::IoError);
    fs::remove_all(dir);
}

TEST(DatasetFiles, CountMismatchDetected) {
    const auto ds = saml::generate_dataset(saml::default_domain_specs(), 2, 16, 16, 9);
    const auto dir = scratch_dir("count");
    saml::save_dataset(ds, dir);
    fs::remove(dir / "domain_3" / "sample_1.img");
    EXPECT_THROW(saml::load_dataset(dir), saml::IoError);
    fs::remove_all(dir);
}

TEST(DatasetFiles, VersionMismatchDetected) {
    const auto ds = saml::generate_dataset(saml::default_domain_specs(), 1, 16, 16, 9);
    const auto dir = scratch_dir("version");
    saml::save_dataset(ds, dir);
    auto manifest = nlohmann::json::parse(saml::read_file(dir / "manifest.json"));
    manifest["version"] = 99;
    saml::write_file_atomic(dir / "manifest.json", manifest.dump());
    EXPECT_THROW(saml::load_dataset(dir), saml::IoError);
    fs::remove_all(dir);
}
