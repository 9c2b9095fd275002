#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffdti.h"
#include "diffdti/nifti.hpp"
#include "diffdti/run_config.hpp"

namespace fs = std::filesystem;
using namespace diffdti;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("diffdti_cli_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& name = "") const { return (path / name).string(); }
};

// Runs the CLI binary; returns the exit code, captures stderr+stdout.
int run_cli(const std::string& args, std::string* output = nullptr) {
    TempDir* keep = nullptr;
    (void)keep;
    static int counter = 0;
    const std::string log =
        (fs::temp_directory_path() / ("diffdti_out_" + std::to_string(::getpid()) + "_" +
                                      std::to_string(counter++)))
            .string();
    const std::string cmd = std::string(DIFFDTI_CLI_PATH) + " " + args + " > " + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (output) {
        std::ifstream in(log);
        std::stringstream ss;
        ss << in.rdbuf();
        *output = ss.str();
    }
    fs::remove(log);
    return WEXITSTATUS(rc);
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("run config: schema validation and typed access") {
    RunConfig cfg;
    CHECK_THROWS_WITH_AS(cfg.set("no_such_key", "1"), doctest::Contains("unknown key"), Error);
    CHECK_THROWS_AS(cfg.set("max_steps", "abc"), Error);
    CHECK_THROWS_AS(cfg.set("learning_rate", "fast"), Error);
    CHECK_THROWS_AS(cfg.set("eval_masked", "maybe"), Error);

    cfg.set("max_steps", "123");
    CHECK(cfg.get_int("max_steps") == 123);
    CHECK(cfg.get_double("learning_rate") == doctest::Approx(2e-4)); // default
    CHECK(cfg.get_string("target_map") == "fa");
    CHECK(cfg.get_bool("eval_masked"));

    auto grid = cfg.get_list("ablate_n_grid");
    REQUIRE(grid.size() == 5);
    CHECK(grid[0] == 200);
    CHECK(grid[4] == 2000);

    // defaults follow the published sampler settings
    CHECK(cfg.get_int("num_steps") == 1000);
    CHECK(cfg.get_double("snr") == doctest::Approx(0.075));
    CHECK(cfg.get_double("sigma_max") == doctest::Approx(348.0));
    CHECK(cfg.get_double("sigma_min") == doctest::Approx(0.01));
    CHECK(cfg.get_double("learning_rate") == doctest::Approx(2e-4));
    CHECK(cfg.get_double("grad_clip_max_norm") == doctest::Approx(1.0));
    CHECK(cfg.get_double("ema_decay") == doctest::Approx(0.999));
    CHECK(cfg.get_int("batch_size") == 8);
    CHECK(cfg.get_int("phantom_subjects") == 8);
}

TEST_CASE("run config: file loading with comments and overrides") {
    TempDir tmp;
    {
        std::ofstream out(tmp.str("run.cfg"));
        out << "# comment line\n";
        out << "max_steps = 77\n";
        out << "target_map=md\n";
        out << "\n";
    }
    RunConfig cfg = RunConfig::from_file(tmp.str("run.cfg"));
    CHECK(cfg.get_int("max_steps") == 77);
    CHECK(cfg.get_string("target_map") == "md");
    cfg.set("max_steps", "88");
    CHECK(cfg.get_int("max_steps") == 88);

    std::ofstream(tmp.str("bad.cfg")) << "not a key value line\n";
    CHECK_THROWS_AS(RunConfig::from_file(tmp.str("bad.cfg")), Error);

    auto echo = cfg.effective();
    CHECK(echo.at("max_steps") == "88");
    CHECK(echo.count("sigma_max") == 1);
}

TEST_CASE("C API: config lifecycle, errors, version") {
    dd_config* cfg = dd_config_create();
    REQUIRE(cfg != nullptr);

    CHECK(dd_config_set(cfg, "seed", "5") == DD_OK);
    CHECK(dd_config_set(cfg, "bogus", "5") == DD_ERR_CONFIG);
    CHECK(std::string(dd_last_error()).find("unknown key") != std::string::npos);

    const char* v = dd_config_get(cfg, "seed");
    REQUIRE(v != nullptr);
    CHECK(std::string(v) == "5");
    CHECK(dd_config_get(cfg, "not_a_key") == nullptr);

    CHECK(std::string(dd_version()) == "0.1.0");

    // unknown command through the dispatcher
    CHECK(dd_run("bogus_command", cfg) == DD_ERR_CONFIG);

    dd_config_free(cfg);
}

TEST_CASE("C API: phantom generation writes a dataset") {
    TempDir tmp;
    dd_config* cfg = dd_config_create();
    dd_config_set(cfg, "out_dir", tmp.str().c_str());
    dd_config_set(cfg, "phantom_size", "24");
    dd_config_set(cfg, "phantom_subjects", "3");
    dd_config_set(cfg, "phantom_test_subjects", "1");
    dd_config_set(cfg, "phantom_slices", "2");
    dd_config_set(cfg, "seed", "11");
    CHECK(dd_run_phantom(cfg) == DD_OK);
    CHECK(fs::exists(tmp.str("manifest.txt")));
    CHECK(fs::exists(tmp.str("sub-001/dwi.nii")));
    CHECK(fs::exists(tmp.str("sub-003/truth_fa.nii")));

    // invalid spec is a config error
    dd_config_set(cfg, "phantom_size", "0");
    CHECK(dd_run_phantom(cfg) == DD_ERR_CONFIG);
    dd_config_free(cfg);
}

TEST_CASE("CLI: usage and config errors exit with code 2") {
    std::string out;
    CHECK(run_cli("", &out) == 2);
    CHECK(run_cli("frobnicate", &out) == 2);
    CHECK(out.find("unknown command") != std::string::npos);
    CHECK(run_cli("phantom --no_such=1", &out) == 2);
    CHECK(run_cli("phantom --size 0 --out /tmp/unused_diffdti", &out) == 2);
    CHECK(run_cli("--help", &out) == 0);
    CHECK(out.find("usage:") != std::string::npos);
}

TEST_CASE("CLI: phantom runs are reproducible byte-for-byte") {
    TempDir a, b;
    const std::string args = "phantom --size 24 --subjects 3 --seed 7 "
                             "--phantom_slices=2 --phantom_test_subjects=1 --out ";
    REQUIRE(run_cli(args + a.str()) == 0);
    REQUIRE(run_cli(args + b.str()) == 0);
    for (const char* rel :
         {"sub-001/dwi.nii", "sub-002/dwi.nii", "sub-003/truth_fa.nii", "sub-001/bvecs.txt"}) {
        CHECK(file_bytes(a.str(rel)) == file_bytes(b.str(rel)));
        CHECK(!file_bytes(a.str(rel)).empty());
    }
    // manifests list all subjects
    std::ifstream manifest(a.str("manifest.txt"));
    int lines = 0;
    std::string line;
    while (std::getline(manifest, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 3);
}

TEST_CASE("CLI: fit produces reference maps matching the phantom truth") {
    TempDir tmp;
    REQUIRE(run_cli("phantom --size 24 --subjects 2 --seed 3 --phantom_slices=2 "
                    "--phantom_test_subjects=1 --out " +
                    tmp.str()) == 0);
    REQUIRE(run_cli("fit --out " + tmp.str()) == 0);

    Volume ref = nifti_read(tmp.str("sub-001/ref_fa.nii"));
    Volume truth = nifti_read(tmp.str("sub-001/truth_fa.nii"));
    Volume mask = nifti_read(tmp.str("sub-001/ref_mask.nii"));
    REQUIRE(ref.same_grid(truth));
    size_t checked = 0;
    for (size_t v = 0; v < ref.nvox(); ++v) {
        if (mask.data[v] < 0.5) continue;
        CHECK(std::fabs(ref.data[v] - truth.data[v]) < 1e-6);
        ++checked;
    }
    CHECK(checked > 50);

    // spatial metadata carried through
    Volume dwi = nifti_read(tmp.str("sub-001/dwi.nii"));
    CHECK(ref.pixdim[0] == dwi.pixdim[0]);
}

TEST_CASE("CLI: missing input files exit with code 1 and name the path") {
    TempDir tmp;
    {
        std::ofstream m(tmp.str("manifest.txt"));
        m << "sub-001 missing_dwi.nii missing.bval missing.bvec train\n";
    }
    std::string out;
    CHECK(run_cli("fit --out " + tmp.str(), &out) == 1);
    CHECK(out.find("missing.bval") != std::string::npos);
}

TEST_CASE("CLI: train with max_steps 0 checkpoints the initial parameters") {
    TempDir tmp;
    REQUIRE(run_cli("phantom --size 16 --subjects 2 --seed 5 --phantom_slices=2 "
                    "--phantom_test_subjects=1 --phantom_directions=6 --out " +
                    tmp.str()) == 0);
    REQUIRE(run_cli("fit --out " + tmp.str()) == 0);
    std::string out;
    const int rc = run_cli("train --out " + tmp.str() +
                               " --max_steps=0 --unet_depth=2 --base_channels=8 "
                               "--gn_groups=4 --channel_mult=1,2 --pad_size=16 "
                               "--n_directions=3 --slices_per_subject=2 --batch_size=1",
                           &out);
    INFO(out);
    CHECK(rc == 0);
    CHECK(fs::exists(tmp.str("checkpoints/ckpt_final.ddt")));

    // sampling from that checkpoint exercises the full conditional path
    const int rc2 = run_cli("sample --out " + tmp.str() +
                                " --num_steps=4 --sample_batch=2 --seed=1",
                            &out);
    INFO(out);
    CHECK(rc2 == 0);
    CHECK(fs::exists(tmp.str("samples/sub-002_gen_fa.nii")));
    CHECK(fs::exists(tmp.str("samples/timing.csv")));

    // an untrained net gives garbage; eval must still run end to end
    const int rc3 = run_cli("eval --out " + tmp.str(), &out);
    INFO(out);
    CHECK(rc3 == 0);
    CHECK(fs::exists(tmp.str("eval/report.csv")));
    CHECK(file_bytes(tmp.str("eval/report.csv")).find("fa,psnr") != std::string::npos);
}

TEST_CASE("CLI: sample without a checkpoint exits with code 1") {
    TempDir tmp;
    std::string out;
    CHECK(run_cli("sample --out " + tmp.str(), &out) == 1);
    CHECK(out.find("checkpoint not found") != std::string::npos);
}

TEST_CASE("CLI: eval reports unpaired items with their ids") {
    TempDir tmp;
    REQUIRE(run_cli("phantom --size 16 --subjects 2 --seed 2 --phantom_slices=2 "
                    "--phantom_test_subjects=1 --phantom_directions=6 --out " +
                    tmp.str()) == 0);
    // fabricate a generated map without running fit: references are missing
    fs::create_directories(tmp.str("samples"));
    Volume fake(16, 16, 2, 1);
    nifti_write(tmp.str("samples/sub-002_gen_fa.nii"), fake);
    std::string out;
    CHECK(run_cli("eval --out " + tmp.str(), &out) == 1);
    CHECK(out.find("unpaired") != std::string::npos);
    CHECK(out.find("sub-002") != std::string::npos);
}
