#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "semcorr/tensor.hpp"

using namespace semcorr;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("semcorr_test_" + name);
}
}  // namespace

TEST_CASE("tensor construction validates extents") {
    Tensor t({2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    REQUIRE_THROWS_AS(Tensor({2, 0}), validation_error);
    REQUIRE_THROWS_AS(Tensor({2, 2}, std::vector<float>{1.f, 2.f}), validation_error);
}

TEST_CASE("fmap round-trip is bit identical") {
    Tensor t({3, 4, 2});
    for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = 0.37f * float(i) - 2.25f;
    auto path = temp_file("roundtrip.fmap");
    save_fmap(path, t);
    Tensor back = load_fmap(path);
    REQUIRE(back.dims == t.dims);
    REQUIRE(back.data == t.data);
    fs::remove(path);
}

TEST_CASE("fmap rejects bad magic and truncation") {
    Tensor t({2, 2}, {1.f, 2.f, 3.f, 4.f});
    std::ostringstream os;
    binary_writer w(os);
    write_fmap(w, t);
    std::string bytes = os.str();

    SECTION("bad magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        std::istringstream is(bad);
        binary_reader r(is, "mem");
        try {
            read_fmap(r);
            FAIL("expected parse_error");
        } catch (const parse_error& e) {
            REQUIRE(e.offset == 0);
        }
    }

    SECTION("truncated mid-payload names expected vs actual length") {
        std::string cut = bytes.substr(0, bytes.size() - 6);
        std::istringstream is(cut);
        binary_reader r(is, "mem");
        try {
            read_fmap(r);
            FAIL("expected parse_error");
        } catch (const parse_error& e) {
            REQUIRE(e.offset == 4 + 4 + 4 + 2 * 4);  // start of payload
            REQUIRE(std::string(e.what()).find("expected 16 bytes") != std::string::npos);
            REQUIRE(std::string(e.what()).find("got 10") != std::string::npos);
        }
    }
}

TEST_CASE("atomic write leaves no partial artifact on failure") {
    auto path = temp_file("atomic.bin");
    fs::remove(path);
    REQUIRE_THROWS(atomic_write_file(path, [](std::ostream&) {
        throw io_error("simulated failure mid-write");
    }));
    REQUIRE_FALSE(fs::exists(path));

    atomic_write_file(path, [](std::ostream& out) { out << "ok"; });
    REQUIRE(fs::exists(path));
    fs::remove(path);
}
