#include <doctest.h>

#include "unlearn/config.hpp"
#include "unlearn/errors.hpp"

using namespace unlearn;

namespace {

const char* kSample = R"(
# run settings
[run]
seed = 7
out_dir = runs   # trailing comment

[forget]
steps = 120
lr = 1e-3
grid_demo = 0.0, 0.5, 1.0
flag = true
)";

}  // namespace

TEST_CASE("config parses sections, comments and typed values") {
    Config c = Config::parse_string(kSample, "sample");
    CHECK(c.get_int("run", "seed", -1) == 7);
    CHECK(c.get_str("run", "out_dir") == "runs");
    CHECK(c.get_int("forget", "steps", 0) == 120);
    CHECK(c.get_real("forget", "lr", 0.0) == doctest::Approx(1e-3));
    CHECK(c.get_bool("forget", "flag", false));
    CHECK(c.get_real_list("forget", "grid_demo", {}) == std::vector<real>{0.0, 0.5, 1.0});
    CHECK(c.get_int("forget", "absent", 42) == 42);
}

TEST_CASE("missing required keys raise named validation errors") {
    Config c = Config::parse_string(kSample, "sample");
    try {
        c.get_str("io", "original_checkpoint");
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("original_checkpoint") != std::string::npos);
        CHECK(msg.find("[io]") != std::string::npos);
    }
}

TEST_CASE("schema checking rejects unknown keys with line numbers") {
    Config c = Config::parse_string("[run]\nseed = 1\ntypo_key = 2\n", "cfg");
    std::map<std::string, std::set<std::string>> allowed = {{"run", {"seed"}}};
    try {
        c.check_schema(allowed);
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("typo_key") != std::string::npos);
        CHECK(msg.find(":3") != std::string::npos);
    }
    CHECK_THROWS_AS(
        Config::parse_string("[zzz]\nk = 1\n", "cfg").check_schema(allowed), ConfigError);
}

TEST_CASE("malformed lines and duplicates are rejected") {
    CHECK_THROWS_AS(Config::parse_string("[run]\nseed 1\n", "c"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("key = 1\n", "c"), ConfigError);  // outside a section
    CHECK_THROWS_AS(Config::parse_string("[run\nseed = 1\n", "c"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("[run]\nseed = 1\nseed = 2\n", "c"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("[run]\nseed = notanint\n", "c").get_int("run", "seed", 0),
                    ConfigError);
    CHECK_THROWS_AS(Config::parse_string("[run]\nflag = maybe\n", "c").get_bool("run", "flag", false),
                    ConfigError);
}

TEST_CASE("content hash tracks values, not formatting") {
    Config a = Config::parse_string("[run]\nseed = 1\n", "a");
    Config b = Config::parse_string("# banner\n[run]\n  seed   =  1  # same\n", "b");
    Config c = Config::parse_string("[run]\nseed = 2\n", "c");
    CHECK(a.content_hash() == b.content_hash());
    CHECK(a.content_hash() != c.content_hash());

    Config d = a;
    d.set("run", "seed", "3");
    CHECK(d.content_hash() != a.content_hash());
}
