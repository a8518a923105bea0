// Drives the saml_lab binary end to end.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "saml/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "saml_cli";
        fs::remove_all(p);
        fs::create_directories(p);
        saml::write_file_atomic(p / "small.toml",
                                "image_size = 16\nsamples_per_domain = 4\nbase_channels = 2\ndepth = 2\n"
                                "batch_per_domain = 2\niterations = 4\nnum_seeds = 1\narms = [\"deepall\", \"saml\"]\n"
                                "meta_lr = 1e-3\nphi_lr = 1e-3\nalpha = 1e-3\ncontour_width = 1\n"
                                "background_width = 2\ndataset = \"data\"\n");
        return p;
    }();
    return dir;
}

int lab(const std::string& args) {
    const std::string cmd = "cd " + work().string() + " && " SAML_LAB_EXE " --config small.toml " + args +
                            " > last.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read(const std::string& rel) { return saml::read_file(work() / rel); }

void ensure_data() {
    static const bool done = [] { return lab("gen-data") == 0; }();
    ASSERT_TRUE(done) << read("last.log");
}

}  // namespace

TEST(Cli, GenDataIsDeterministicAndHonoursSeed) {
    ensure_data();
    ASSERT_EQ(lab("--dataset data_again gen-data"), 0);
    EXPECT_EQ(read("data/manifest.json"), read("data_again/manifest.json"));
    ASSERT_EQ(lab("--dataset data_seed9 --seed 9 gen-data"), 0);
    EXPECT_NE(read("data/manifest.json"), read("data_seed9/manifest.json"));
    EXPECT_TRUE(fs::exists(work() / "data" / "resolved_config.toml"));
}

TEST(Cli, MalformedConfigExitsTwoWithLine) {
    saml::write_file_atomic(work() / "bad.toml", "seed = 1\nnot_a_key = 3\n");
    const int code = std::system(("cd " + work().string() + " && " SAML_LAB_EXE " --config bad.toml gen-data 2> err.log").c_str());
    EXPECT_EQ(WEXITSTATUS(code), 2);
    EXPECT_NE(read("err.log").find("line 2"), std::string::npos) << read("err.log");
    EXPECT_EQ(lab("--set depth=1 gen-data"), 2);
    EXPECT_EQ(lab("train --arm nonsense"), 2);
}

TEST(Cli, ZeroIterationsCheckpointIsInitialization) {
    ensure_data();
    ASSERT_EQ(lab("--out z_deepall train --arm deepall --iterations 0"), 0) << read("last.log");
    ASSERT_EQ(lab("--out z_saml train --arm saml --iterations 0"), 0) << read("last.log");
    EXPECT_EQ(read("z_deepall/model.ckpt"), read("z_saml/model.ckpt"));
    EXPECT_EQ(read("z_saml/loss.csv"), "iteration,l_seg_tr,l_seg_te,l_compact,l_smooth,total\n");
    ASSERT_EQ(lab("--out t_deepall train --arm deepall"), 0);
    ASSERT_EQ(lab("--out t_saml train --arm saml"), 0);
    EXPECT_NE(read("t_deepall/model.ckpt"), read("t_saml/model.ckpt"));
    EXPECT_NE(read("t_deepall/model.ckpt"), read("z_deepall/model.ckpt"));
    EXPECT_TRUE(fs::exists(work() / "t_saml" / "resolved_config.toml"));
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
    ensure_data();
    ASSERT_EQ(lab("--out r_full train --iterations 6"), 0);
    ASSERT_EQ(lab("--out r_part train --iterations 3"), 0);
    ASSERT_EQ(lab("--out r_part --resume train --iterations 6"), 0);
    EXPECT_NE(read("last.log").find("resuming at iteration 3"), std::string::npos);
    EXPECT_EQ(read("r_full/loss.csv"), read("r_part/loss.csv"));
    EXPECT_EQ(read("r_full/model.ckpt"), read("r_part/model.ckpt"));
    ASSERT_EQ(lab("--out r_again train --iterations 6"), 0);
    EXPECT_EQ(read("r_full/loss.csv"), read("r_again/loss.csv"));
}

TEST(Cli, EvalScoresACheckpoint) {
    ensure_data();
    ASSERT_EQ(lab("--out e train --iterations 2"), 0);
    ASSERT_EQ(lab("--out e eval --domain 1"), 0) << read("last.log");
    EXPECT_TRUE(fs::exists(work() / "e" / "eval_domain1.json"));
    EXPECT_EQ(lab("--out e eval --checkpoint missing.ckpt"), 3);
}

TEST(Cli, NumericFailureExitsFourWithDiagnostic) {
    ensure_data();
    EXPECT_EQ(lab("--out nan --set meta_lr=1e30 train --iterations 6"), 4) << read("last.log");
    EXPECT_NE(read("nan/diagnostic.txt").find("configuration:"), std::string::npos);
}

TEST(Cli, MissingInputsExitThree) {
    EXPECT_EQ(lab("--dataset nowhere train"), 3);
    fs::create_directories(work() / "empty_results");
    EXPECT_EQ(lab("report empty_results"), 3);
}

TEST(Cli, LeaveOneOutSweepAndReport) {
    ensure_data();
    ASSERT_EQ(lab("--out exp --set iterations=2 loo"), 0) << read("last.log");
    EXPECT_EQ(saml::read_file(work() / "exp" / "report" / "results.csv").size() > 0, true);
    ASSERT_EQ(lab("--out exp --set iterations=2 --resume sweep-domains"), 0) << read("last.log");
    const auto sweep = read("exp/report/sweep.csv");
    EXPECT_NE(sweep.find("3,saml,1,1,"), std::string::npos) << sweep;
    EXPECT_NE(sweep.find("3,saml,3,1,"), std::string::npos) << sweep;
    const auto first = read("exp/report/table.svg");
    ASSERT_EQ(lab("report exp --to exp_report2"), 0);
    EXPECT_EQ(read("exp_report2/table.svg"), first);
    EXPECT_EQ(read("exp_report2/results.csv"), read("exp/report/results.csv"));
}

TEST(Cli, GradcheckCatchesPerturbedBackward) {
    EXPECT_EQ(lab("gradcheck --perturb-backward sigmoid"), 5);
    EXPECT_NE(read("last.log").find("FAIL"), std::string::npos);
}
