#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "muxplm/corpus.hpp"
#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

using namespace muxplm;

TEST_CASE("tokenize and detokenize") {
  CHECK(tokenize("") == std::vector<std::int32_t>{vocab::kCls});
  CHECK(tokenize("ab") == std::vector<std::int32_t>{vocab::kCls, 97, 98});
  for (const std::string& s : std::vector<std::string>{"", "hello world", "caf\xc3\xa9 \xe2\x82\xac", std::string("\x00\xff", 2)}) {
    CHECK(detokenize(tokenize(s)) == s);
  }
  const auto t = tokenize("\xff");
  CHECK(t[1] == 255);
}

TEST_CASE("assemble_batch pads, truncates and aligns labels") {
  Dataset d;
  d.examples.push_back({tokenize("abc"), 1, {-100, 0, 1, 2}});
  d.examples.push_back({tokenize("a"), 0, {-100, 0}});
  std::vector<std::size_t> idx{0, 1};
  auto b = assemble_batch(d, idx, 2, 3);
  CHECK(b.groups == 1);
  CHECK(b.tokens == std::vector<std::int32_t>{vocab::kCls, 97, 98, vocab::kCls, 97, vocab::kPad});
  CHECK(b.valid == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0});
  CHECK(b.tag_labels == std::vector<std::int32_t>{-100, 0, 1, -100, 0, -100});
  CHECK(b.seq_labels == std::vector<std::int32_t>{1, 0});
  // Padding is never supervised.
  for (std::size_t i = 0; i < b.valid.size(); ++i) {
    if (!b.valid[i]) CHECK(b.tag_labels[i] == -100);
  }
  CHECK_THROWS_AS(assemble_batch(d, std::vector<std::size_t>{0, 1, 0}, 2, 3), DimensionError);
  CHECK_THROWS_AS(assemble_batch(d, std::vector<std::size_t>{0, 5}, 2, 3), ValueError);
}

TEST_CASE("batch sampler determinism and epoch partition") {
  auto data = text_dataset(synth_text_lines(48, 1), 16);
  BatchSampler a(data, 2, 3, 16, 42), b(data, 2, 3, 16, 42), c(data, 2, 3, 16, 43);
  CHECK(a.batches_per_epoch() == 8);
  std::multiset<std::size_t> seen;
  bool differs = false;
  for (int i = 0; i < 8; ++i) {
    auto x = a.next(), y = b.next(), z = c.next();
    CHECK(x.indices == y.indices);
    CHECK(x.tokens == y.tokens);
    differs |= x.indices != z.indices;
    seen.insert(x.indices.begin(), x.indices.end());
  }
  CHECK(differs);
  CHECK(seen.size() == 48);
  for (std::size_t i = 0; i < 48; ++i) CHECK(seen.count(i) == 1);
  CHECK(a.epoch() == 0);
  a.next();
  CHECK(a.epoch() == 1);

  Dataset empty;
  CHECK_THROWS_AS(BatchSampler(empty, 2, 1, 8, 0), ValueError);
  CHECK_THROWS_AS(BatchSampler(data, 50, 1, 8, 0), ValueError);
}

TEST_CASE("prefetching preserves delivery order") {
  auto data = text_dataset(synth_text_lines(30, 2), 12);
  BatchSampler direct(data, 2, 2, 12, 9);
  PrefetchingSampler ahead(BatchSampler(data, 2, 2, 12, 9), 3);
  for (int i = 0; i < 25; ++i) {
    auto x = direct.next(), y = ahead.next();
    CHECK(x.indices == y.indices);
    CHECK(x.tokens == y.tokens);
  }
}

TEST_CASE("synthetic sequence task") {
  auto d = synth_seq_task(300, 5);
  CHECK(d.size() == 300);
  CHECK(d.num_classes == 2);
  std::size_t ones = 0;
  for (const auto& ex : d.examples) {
    const auto text = detokenize(ex.tokens);
    const auto a = std::count(text.begin(), text.end(), 'a');
    const auto b = std::count(text.begin(), text.end(), 'b');
    CHECK(a + b == static_cast<long>(text.size()));
    CHECK(a != b);
    CHECK(ex.label == (a > b ? 0 : 1));
    ones += ex.label;
  }
  CHECK(ones > 100);
  CHECK(ones < 200);
  CHECK(synth_seq_task(20, 5).examples[7].tokens == synth_seq_task(20, 5).examples[7].tokens);

  // "aaab" is class a, "bbba" class b, by the counting rule above.
  auto count_label = [](std::string s) { return std::count(s.begin(), s.end(), 'a') * 2 > static_cast<long>(s.size()) ? 0 : 1; };
  CHECK(count_label("aaab") == 0);
  CHECK(count_label("bbba") == 1);
}

TEST_CASE("synthetic token task") {
  auto d = synth_token_task(100, 6);
  CHECK(d.num_tags == 3);
  for (const auto& ex : d.examples) {
    REQUIRE(ex.tags.size() == ex.tokens.size());
    CHECK(ex.tags[0] == -100);
    CHECK(ex.tags[1] == 0);
    for (std::size_t k = 2; k < ex.tokens.size(); ++k) {
      const char prev = static_cast<char>(ex.tokens[k - 1]);
      const bool vowel = std::string("aeiou").find(prev) != std::string::npos;
      CHECK(ex.tags[k] == (vowel ? 1 : 2));
    }
  }
  CHECK(synth_token_task(5, 6).examples[3].tags == d.examples[3].tags);
}

TEST_CASE("text corpus helpers") {
  auto lines = synth_text_lines(50, 3);
  CHECK(lines.size() == 50);
  CHECK(lines == synth_text_lines(50, 3));
  CHECK(lines != synth_text_lines(50, 4));
  for (const auto& l : lines) CHECK(l.back() == '.');

  const auto path = std::filesystem::temp_directory_path() / "muxplm_corpus_test.txt";
  {
    std::ofstream out(path);
    out << "first line\r\n\nsecond\n";
  }
  CHECK(load_lines(path) == std::vector<std::string>{"first line", "second"});
  auto ds = text_dataset(load_lines(path), 4);
  CHECK(ds.examples[0].tokens.size() == 4);
  CHECK(ds.examples[1].tokens == std::vector<std::int32_t>{vocab::kCls, 's', 'e', 'c'});
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_lines(path), Error);
}
