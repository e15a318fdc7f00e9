#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cfloat>
#include <cmath>
#include <cstring>

#include "rsid/data.hpp"
#include "test_util.hpp"

using namespace rsid;

TEST_CASE("load_items interns tokens per field in first-seen order") {
  testutil::TempDir dir("items");
  const std::string path = dir.file("items.tsv");
  testutil::write_file(path, "i1\tcatA\ni2\tcatA\ni3\tcatB\n");

  const auto table = load_items(path);
  CHECK(table.item_count == 3);
  CHECK(table.schema.field_count() == 2);
  CHECK(table.schema.vocab_sizes[0] == 3);
  CHECK(table.schema.vocab_sizes[1] == 2);
  CHECK(table.field_value(0, 1) == 0);
  CHECK(table.field_value(1, 1) == 0);
  CHECK(table.field_value(2, 1) == 1);
  CHECK(table.item_token(2) == "i3");
  CHECK(table.find_item("i2") == 1);
  CHECK(table.find_item("nope") == -1);

  // Interning is order-stable: a second load gives identical indices.
  const auto again = load_items(path);
  CHECK(again.values == table.values);
  CHECK(again.vocab_tokens == table.vocab_tokens);
}

TEST_CASE("load_items rejects bad input") {
  testutil::TempDir dir("items_bad");
  const std::string empty = dir.file("empty.tsv");
  testutil::write_file(empty, "");
  CHECK_THROWS_WITH_AS(load_items(empty), doctest::Contains("no items"),
                       Error);

  const std::string dup = dir.file("dup.tsv");
  testutil::write_file(dup, "i1\tA\ni1\tB\n");
  CHECK_THROWS_WITH_AS(load_items(dup), doctest::Contains("line 2"), Error);

  const std::string ragged = dir.file("ragged.tsv");
  testutil::write_file(ragged, "i1\tA\ni2\n");
  CHECK_THROWS_WITH_AS(load_items(ragged), doctest::Contains("line 2"), Error);
}

namespace {

ItemTable three_items(testutil::TempDir& dir) {
  const std::string path = dir.file("items3.tsv");
  testutil::write_file(path, "i1\tcatA\ni2\tcatA\ni3\tcatB\n");
  return load_items(path);
}

}  // namespace

TEST_CASE("load_sequences resolves tokens and rejects unknowns") {
  testutil::TempDir dir("seqs");
  const auto items = three_items(dir);

  const std::string path = dir.file("seqs.tsv");
  testutil::write_file(path, "u1\ti1 i2 i3\n");
  const auto store = load_sequences(path, items);
  REQUIRE(store.sequences.size() == 1);
  CHECK(store.sequences[0] == std::vector<std::int32_t>{0, 1, 2});
  CHECK(store.user_tokens[0] == "u1");

  const std::string bad = dir.file("bad.tsv");
  testutil::write_file(bad, "u1\ti9\n");
  CHECK_THROWS_WITH_AS(load_sequences(bad, items),
                       doctest::Contains("unknown item token 'i9'"), Error);

  const std::string blank = dir.file("blank.tsv");
  testutil::write_file(blank, "u1\t\n");
  CHECK_THROWS_WITH_AS(load_sequences(blank, items),
                       doctest::Contains("empty sequence"), Error);
}

TEST_CASE("window enumeration: every position >= 2 is a target once") {
  // Length-40 sequence, max_len 32, stride 1: the invariant gives T-1 = 39
  // prediction targets; exactly 40-32+1 = 9 of them have a full-length
  // (32-token) window. Both counts enumerated by hand from the definition.
  SequenceStore store;
  store.max_len = 32;
  std::vector<std::int32_t> seq(40);
  for (int i = 0; i < 40; ++i) seq[i] = i % 3;  // indices into a 3-item table
  store.sequences.push_back(seq);
  store.user_tokens.push_back("u1");

  const auto windows = enumerate_windows(store);
  CHECK(windows.count() == 39);
  std::size_t full = 0;
  for (std::size_t w = 0; w < windows.count(); ++w) {
    const auto hist = windows.history_of(w);
    CHECK(hist.size() >= 1);
    CHECK(hist.size() <= 31);
    if (hist.size() + 1 == 32) ++full;
    // Window w targets position w+2 (1-based).
    CHECK(windows.targets[w] == seq[w + 1]);
  }
  CHECK(full == 9);

  // Two users double the counts.
  store.sequences.push_back(seq);
  store.user_tokens.push_back("u2");
  CHECK(enumerate_windows(store).count() == 78);
}

TEST_CASE("window enumeration edge cases") {
  SequenceStore store;
  store.max_len = 32;
  store.sequences = {{0}};  // single interaction: no prediction target
  CHECK(enumerate_windows(store).count() == 0);

  store.sequences = {{0, 1}};
  const auto w = enumerate_windows(store);
  REQUIRE(w.count() == 1);
  CHECK(w.history_of(0).size() == 1);
  CHECK(w.targets[0] == 1);

  // Stride anchors at the sequence end.
  store.sequences = {{0, 1, 2, 0, 1, 2, 0}};  // T = 7
  const auto strided = enumerate_windows(store, 3);
  REQUIRE(strided.count() == 2);
  CHECK(strided.targets[0] == 0);  // position 4
  CHECK(strided.targets[1] == 0);  // position 7
}

TEST_CASE("leave-one-out split covers every target exactly once") {
  SequenceStore store;
  store.max_len = 8;
  store.sequences = {{0, 1, 2, 0, 1}, {2, 1}, {0, 1, 2}};
  const auto split = leave_one_out_split(store);
  CHECK(split.test.count() == 3);
  CHECK(split.valid.count() == 2);  // users with T >= 3
  CHECK(split.train.count() == 2);  // only user 1 has T >= 4 (targets 2..3)

  const auto all = enumerate_windows(store);
  CHECK(split.train.count() + split.valid.count() + split.test.count() ==
        all.count());
}

TEST_CASE("embedding round-trip is bit-exact") {
  testutil::TempDir dir("emb");
  EmbeddingMatrix m;
  m.rows = 3;
  m.dim = 4;
  m.values = {0.0f, -0.0f, FLT_TRUE_MIN, -FLT_TRUE_MIN,
              FLT_MIN / 2.0f, 1.0f, -3.25f, 3.4e38f,
              1e-38f, 42.0f, -1e-44f, 0.5f};
  m.row_tokens = {"a", "b", "c"};

  const std::string path = dir.file("m.rsid");
  write_embeddings(m, path);
  const auto back = read_embeddings(path);
  REQUIRE(back.rows == 3);
  REQUIRE(back.dim == 4);
  REQUIRE(back.values.size() == m.values.size());
  CHECK(std::memcmp(back.values.data(), m.values.data(),
                    m.values.size() * sizeof(float)) == 0);
  CHECK(back.row_tokens == m.row_tokens);
}

TEST_CASE("embedding round-trip survives random payloads") {
  testutil::TempDir dir("embrand");
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto m = testutil::random_embeddings(17, 9, seed);
    const std::string path = dir.file("r.rsid");
    write_embeddings(m, path);
    const auto back = read_embeddings(path);
    CHECK(std::memcmp(back.values.data(), m.values.data(),
                      m.values.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("embedding file layout matches the format definition") {
  // magic(4) + version/N/D (12) + one float (4) + JSON trailer.
  testutil::TempDir dir("emblayout");
  EmbeddingMatrix m;
  m.rows = 1;
  m.dim = 1;
  m.values = {0.5f};
  m.row_tokens = {"x"};
  const std::string path = dir.file("one.rsid");
  write_embeddings(m, path);
  const std::string raw = testutil::read_file(path);
  const std::string trailer = "[\"x\"]";
  CHECK(raw.size() == 4 + 12 + 4 + trailer.size());
  CHECK(raw.substr(0, 4) == "RSID");
  CHECK(raw.substr(20) == trailer);
}

TEST_CASE("embedding reader rejects corrupt files") {
  testutil::TempDir dir("embbad");
  auto m = testutil::random_embeddings(2, 2, 7);
  const std::string path = dir.file("m.rsid");
  write_embeddings(m, path);

  std::string raw = testutil::read_file(path);
  std::string bad_magic = raw;
  bad_magic[0] = 'X';
  testutil::write_file(dir.file("bad1.rsid"), bad_magic);
  CHECK_THROWS_WITH_AS(read_embeddings(dir.file("bad1.rsid")),
                       doctest::Contains("bad magic"), Error);

  testutil::write_file(dir.file("bad2.rsid"), raw.substr(0, 18));
  CHECK_THROWS_WITH_AS(read_embeddings(dir.file("bad2.rsid")),
                       doctest::Contains("truncated"), Error);

  EmbeddingMatrix nonfinite = m;
  nonfinite.values[0] = std::nanf("");
  CHECK_THROWS_WITH_AS(write_embeddings(nonfinite, dir.file("nan.rsid")),
                       doctest::Contains("non-finite"), Error);
}

TEST_CASE("RSID_THREADS drives the default thread count") {
  setenv("RSID_THREADS", "3", 1);
  CHECK(resolve_threads(0) == 3);
  CHECK(resolve_threads(2) == 2);
  unsetenv("RSID_THREADS");
  CHECK(resolve_threads(0) == 1);
  CHECK(resolve_threads(-1) == 1);
}
