#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "byb/checkpoint.hpp"
#include "byb/rng.hpp"
#include "test_util.hpp"

using namespace byb;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoint round trip preserves names, shapes and bits") {
    Rng rng(3);
    NamedTensors entries;
    entries.emplace_back("student.embedding", test_util::random_tensor({7, 4}, rng, -2, 2, false));
    entries.emplace_back("student.b2", test_util::random_tensor({1}, rng, -2, 2, false));
    entries.emplace_back("seqmodel.layer0.wq", test_util::random_tensor({4, 4}, rng, -2, 2, false));
    entries.emplace_back("scalar", Tensor::scalar(-0.0));

    const std::string path = temp_path("byb_ckpt_test.bybt");
    save_checkpoint(path, entries);
    NamedTensors loaded = load_checkpoint(path);

    REQUIRE(loaded.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(loaded[i].first == entries[i].first);
        CHECK(loaded[i].second.shape() == entries[i].second.shape());
        for (Index j = 0; j < entries[i].second.size(); ++j)
            CHECK(loaded[i].second.values()[j] == entries[i].second.values()[j]);
    }
    CHECK(checkpoint_has(loaded, "student.b2"));
    CHECK(!checkpoint_has(loaded, "student.b3"));
    CHECK_THROWS_AS(checkpoint_get(loaded, "missing"), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint header layout") {
    const std::string path = temp_path("byb_ckpt_header.bybt");
    save_checkpoint(path, {{"ab", Tensor::from_data({2}, {1.0, 2.0})}});
    std::ifstream is(path, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "BYBT");
    unsigned char version[4], count[4];
    is.read(reinterpret_cast<char*>(version), 4);
    is.read(reinterpret_cast<char*>(count), 4);
    CHECK(version[0] == kCheckpointVersion);
    CHECK(count[0] == 1);
    unsigned char name_len[2];
    is.read(reinterpret_cast<char*>(name_len), 2);
    CHECK(name_len[0] == 2);  // little-endian u16
    CHECK(name_len[1] == 0);
    char name[2];
    is.read(name, 2);
    CHECK(std::string(name, 2) == "ab");
    unsigned char rank;
    is.read(reinterpret_cast<char*>(&rank), 1);
    CHECK(rank == 1);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects garbage") {
    const std::string path = temp_path("byb_ckpt_bad.bybt");
    std::ofstream(path, std::ios::binary) << "NOPE and some trailing bytes";
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    CHECK_THROWS_AS(load_checkpoint(path + ".does_not_exist"), IoError);
    std::filesystem::remove(path);
}
