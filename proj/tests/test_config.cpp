#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <unistd.h>

#include "milstm/config.hpp"

using namespace milstm;
using nlohmann::json;

namespace {

struct TempDir {
    std::string path;
    TempDir() {
        path = "/tmp/milstm_cfg_" + std::to_string(getpid());
        std::string cmd = "mkdir -p " + path;
        REQUIRE(std::system(cmd.c_str()) == 0);
    }
    ~TempDir() {
        std::string cmd = "rm -rf " + path;
        std::system(cmd.c_str());
    }
    std::string file(const std::string& name) const { return path + "/" + name; }
};

}  // namespace

TEST_CASE("fnv1a64 matches published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("defaults survive a json round trip") {
    RunConfig a;
    RunConfig b = RunConfig::from_json(a.to_json());
    CHECK(a.to_json() == b.to_json());
    CHECK(a.hash() == b.hash());
    CHECK(RunConfig::from_json(json::object()).hash() == a.hash());
}

TEST_CASE("unknown keys are rejected") {
    json j = {{"task", "multi_digit"}, {"sigm", 2.0}};
    CHECK_THROWS_AS(RunConfig::from_json(j), FormatError);
    CHECK_THROWS_AS(RunConfig::from_json(json::array()), FormatError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"lr", "fast"}}), FormatError);
}

TEST_CASE("hash is order independent and value sensitive") {
    json a = {{"task", "counting"}, {"seed", 9}};
    json b = {{"seed", 9}, {"task", "counting"}};
    CHECK(RunConfig::from_json(a).hash() == RunConfig::from_json(b).hash());

    RunConfig base;
    RunConfig tweaked;
    tweaked.seed = base.seed + 1;
    CHECK(base.hash() != tweaked.hash());
    CHECK(base.hash_hex().size() == 16);
}

TEST_CASE("component views follow the task") {
    RunConfig c;
    c.task = "counting";
    c.n = 64;
    c.h = 48;
    c.pooling = "mean";
    CHECK(c.scenario_kind() == ScenarioKind::counting);
    CHECK(c.model_config().head == HeadKind::regressor);
    CHECK(c.model_config().pooling == PoolingKind::mean);
    CHECK(c.model_config().idu.feature_dim == 64);
    CHECK(c.scenario().witnesses == std::vector<uint8_t>{9});

    c.task = "multi_digit";
    CHECK(c.model_config().head == HeadKind::classifier);
    CHECK((c.scenario().witnesses == std::vector<uint8_t>{3, 6}));

    c.task = "lookbook";
    CHECK_THROWS(c.scenario_kind());
}

TEST_CASE("sub-streams are distinct but derived from one seed") {
    RunConfig c;
    c.seed = 123;
    std::set<uint64_t> seeds = {c.scenario().seed, c.train_config().seed,
                                c.init_seed(), c.eval_seed()};
    CHECK(seeds.size() == 4);

    RunConfig same = c;
    CHECK(same.init_seed() == c.init_seed());
    same.seed = 124;
    CHECK(same.init_seed() != c.init_seed());
}

TEST_CASE("run id falls back to task and seed") {
    RunConfig c;
    c.task = "outlier";
    c.seed = 42;
    CHECK(c.effective_run_id() == "outlier-s42");
    c.run_id = "pilot";
    CHECK(c.effective_run_id() == "pilot");
}

TEST_CASE("config files round trip through disk") {
    TempDir dir;
    RunConfig c;
    c.task = "multi_digit";
    c.epochs = 7;
    c.run_id = "roundtrip";
    std::string path = dir.file("run.json");
    save_run_config(path, c);
    RunConfig back = load_run_config(path);
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());

    CHECK_THROWS_AS(load_run_config(dir.file("missing.json")), FormatError);
    std::ofstream bad(dir.file("bad.json"));
    bad << "{ not json";
    bad.close();
    CHECK_THROWS_AS(load_run_config(dir.file("bad.json")), FormatError);
}

TEST_CASE("validation covers the component contracts") {
    RunConfig c;
    c.val_fraction = 1.0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c.val_fraction = 0.2;
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c.epochs = 3;
    c.n_bags = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c.n_bags = 10;
    c.n = 32;
    c.h = 16;
    CHECK_NOTHROW(c.validate());
}
