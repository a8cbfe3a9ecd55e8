#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "muxplm/benchlab.hpp"
#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

using namespace muxplm;

namespace {

// Fixed arithmetic workload; the result feeds a volatile sink so it is kept.
volatile double g_sink = 0.0;
void spin(std::size_t iters) {
  double acc = 1.0;
  for (std::size_t i = 0; i < iters; ++i) acc = acc * 1.0000001 + 1e-9;
  g_sink = acc;
}

ThroughputOptions quick() {
  ThroughputOptions o;
  o.batch = 4;
  o.seq_len = 8;
  o.n_batches = 20;
  o.trials = 3;
  o.warmup_batches = 2;
  return o;
}

std::vector<ParetoPoint> brute_force(const std::vector<ParetoPoint>& pts) {
  std::vector<ParetoPoint> keep;
  for (const auto& p : pts) {
    bool dominated = false;
    for (const auto& q : pts) dominated |= q.throughput > p.throughput && q.accuracy > p.accuracy;
    if (!dominated) keep.push_back(p);
  }
  std::stable_sort(keep.begin(), keep.end(), [](const auto& a, const auto& b) { return a.throughput < b.throughput; });
  return keep;
}

bool same(const std::vector<ParetoPoint>& a, const std::vector<ParetoPoint>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].throughput != b[i].throughput || a[i].accuracy != b[i].accuracy || a[i].label != b[i].label) return false;
  }
  return true;
}

ModelSpec tiny(std::size_t n, MuxKind mux, DemuxKind demux, std::size_t layers = 2) {
  ModelSpec s;
  s.size_name = "tiny";
  auto& c = s.config;
  c.num_layers = layers;
  c.hidden_size = 16;
  c.ffn_size = 32;
  c.num_heads = 2;
  c.head_size = 8;
  c.max_seq_len = 40;
  c.vocab_size = vocab::kSize;
  c.mux_width = n;
  s.mux = mux;
  s.demux = demux;
  return s;
}

}  // namespace

TEST_CASE("throughput report bookkeeping") {
  std::size_t calls = 0;
  auto r = measure_throughput("m", 3, quick(), [&](std::size_t) {
    ++calls;
    spin(2000);
  });
  CHECK(calls == 2 + 3 * 20);
  CHECK(r.trials.size() == 3);
  CHECK(r.n == 3);
  CHECK(r.batch == 4);
  double mean = 0.0;
  for (double t : r.trials) mean += t / 3.0;
  CHECK(r.mean == doctest::Approx(mean));
  CHECK(r.std >= 0.0);

  auto zero = quick();
  zero.n_batches = 0;
  CHECK_THROWS_AS(measure_throughput("m", 1, zero, [](std::size_t) {}), ValueError);
  zero = quick();
  zero.trials = 0;
  CHECK_THROWS_AS(measure_throughput("m", 1, zero, [](std::size_t) {}), ValueError);
}

TEST_CASE("speedup of controlled workloads") {
  auto o = quick();
  o.n_batches = 40;
  auto base = measure_throughput("base", 1, o, [](std::size_t) { spin(200000); });
  auto again = measure_throughput("again", 1, o, [](std::size_t) { spin(200000); });
  auto twice = measure_throughput("twice", 1, o, [](std::size_t) { spin(400000); });
  CHECK(speedup(again, base).ratio == doctest::Approx(1.0).epsilon(0.10));
  CHECK(speedup(twice, base).ratio == doctest::Approx(0.5).epsilon(0.20));
}

TEST_CASE("speedup arithmetic") {
  ThroughputReport a, b;
  a.mean = 1980, b.mean = 1000;
  CHECK(speedup(a, b).ratio == doctest::Approx(1.98));
  CHECK(speedup(a, b).std == 0.0);
  CHECK(speedup(b, b).ratio == 1.0);
  a.std = 198, b.std = 100;  // 10% relative each
  CHECK(speedup(a, b).std == doctest::Approx(1.98 * std::sqrt(0.02)));
  b.mean = 0;
  CHECK_THROWS_AS(speedup(a, b), ValueError);
}

TEST_CASE("pareto frontier examples") {
  CHECK_THROWS_AS(pareto_frontier({}), ValueError);
  std::vector<ParetoPoint> one{{5, 70, "a"}};
  CHECK(same(pareto_frontier(one), one));
  // (2,85) is faster and more accurate, so (1,80) drops out.
  std::vector<ParetoPoint> better{{2, 85, "b"}, {1, 80, "a"}};
  CHECK(same(pareto_frontier(better), {{2, 85, "b"}}));
  std::vector<ParetoPoint> trade{{2, 75, "b"}, {1, 80, "a"}};
  CHECK(same(pareto_frontier(trade), {{1, 80, "a"}, {2, 75, "b"}}));
  std::vector<ParetoPoint> dom{{1, 80, "a"}, {2, 75, "b"}, {3, 85, "c"}};
  CHECK(same(pareto_frontier(dom), {{3, 85, "c"}}));
  // Equal throughput or equal accuracy never dominates.
  std::vector<ParetoPoint> ties{{2, 80, "a"}, {2, 90, "b"}, {3, 80, "c"}};
  CHECK(same(pareto_frontier(ties), ties));
  std::vector<ParetoPoint> bad{{0, 1, "z"}};
  CHECK_THROWS_AS(pareto_frontier(bad), ValueError);
}

TEST_CASE("pareto frontier matches brute force") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ParetoPoint> pts(1 + rng.below(60));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      // Coarse grid so ties are common.
      pts[i] = {1.0 + static_cast<double>(rng.below(12)), static_cast<double>(rng.below(12)), std::to_string(i)};
    }
    REQUIRE(same(pareto_frontier(pts), brute_force(pts)));
  }
}

TEST_CASE("attention entropy") {
  const std::size_t L = 128;
  std::vector<float> uniform(L * L, 1.0f / L);
  std::vector<std::uint8_t> valid(L, 1);
  CHECK(attention_entropy(uniform, 1, 1, L, valid) == doctest::Approx(std::log(128.0)).epsilon(1e-6));
  CHECK(std::log(128.0) == doctest::Approx(4.852).epsilon(1e-3));

  std::vector<float> onehot(4 * 4, 0.0f);
  for (std::size_t q = 0; q < 4; ++q) onehot[q * 4 + (q + 1) % 4] = 1.0f;
  CHECK(attention_entropy(onehot, 1, 1, 4, std::vector<std::uint8_t>(4, 1)) == 0.0);

  // Last key is padding: rows renormalise to uniform over 3 keys, and the
  // padded query is skipped.
  std::vector<float> padded;
  for (int q = 0; q < 4; ++q) padded.insert(padded.end(), {0.3f, 0.3f, 0.3f, 0.1f});
  const std::vector<std::uint8_t> mask{1, 1, 1, 0};
  CHECK(attention_entropy(padded, 1, 1, 4, mask) == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  // Two heads averaged: ln 4 and 0.
  std::vector<float> two(2 * 4 * 4, 0.25f);
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t k = 0; k < 4; ++k) two[16 + q * 4 + k] = k == 0 ? 1.0f : 0.0f;
  CHECK(attention_entropy(two, 1, 2, 4, std::vector<std::uint8_t>(4, 1)) == doctest::Approx(std::log(4.0) / 2));
  CHECK_THROWS_AS(attention_entropy(two, 1, 1, 4, std::vector<std::uint8_t>(4, 1)), DimensionError);
  CHECK_THROWS_AS(attention_entropy(std::vector<float>(16, 0.25f), 1, 1, 4, std::vector<std::uint8_t>(4, 0)), ValueError);
}

TEST_CASE("activation statistic") {
  std::vector<float> h(2 * 3 * 4, -1.75f);
  CHECK(mean_abs_activation(h, 2, 3, 4, std::vector<std::uint8_t>(6, 1)) == doctest::Approx(1.75));
  h[0] = 100.0f;  // position 0 of row 0 is padding below
  CHECK(mean_abs_activation(h, 2, 3, 4, std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1}) == doctest::Approx(1.75));
}

TEST_CASE("muxology profile") {
  auto sample = text_dataset(synth_text_lines(12, 4), 20);
  for (auto [n, mux, demux] : {std::tuple{std::size_t{1}, MuxKind::none, DemuxKind::none},
                               std::tuple{std::size_t{2}, MuxKind::gaussian, DemuxKind::rsa},
                               std::tuple{std::size_t{3}, MuxKind::contextual, DemuxKind::prefix}}) {
    auto model = init_model<float>(tiny(n, mux, demux, 3), 1);
    auto p = muxology(model, sample, 20, 2);
    CHECK(p.activation.size() == 3);
    CHECK(p.entropy.size() == 3);
    CHECK(p.entropy_unit == "nats");
    CHECK(p.samples == (12 / n) * n);
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(p.activation[l] >= 0.0);
      CHECK(p.entropy[l] >= 0.0);
      CHECK(p.entropy[l] <= std::log(20.0 + n) + 1e-9);
    }
  }
  auto model = init_model<float>(tiny(2, MuxKind::gaussian, DemuxKind::rsa), 1);
  CHECK_THROWS_AS(muxology(model, Dataset{}, 20), ValueError);
}

TEST_CASE("seed sweep summary") {
  const std::vector<std::uint64_t> one{4};
  auto r = summarize_sweep(one, std::vector<double>{0.7});
  CHECK(r.delta == 0.0);
  CHECK(r.std == 0.0);
  const std::vector<std::uint64_t> three{1, 2, 3};
  CHECK(summarize_sweep(three, std::vector<double>{0.5, 0.5, 0.5}).delta == 0.0);
  r = seed_sweep(three, [](std::uint64_t s) { return static_cast<double>(s); });
  CHECK(r.mean == 2.0);
  CHECK(r.std == 1.0);
  CHECK(r.max == 3.0);
  CHECK(r.min == 1.0);
  CHECK(r.delta == 2.0);
  CHECK_THROWS_AS(summarize_sweep({}, {}), ValueError);
  CHECK_THROWS_AS(summarize_sweep(three, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("report formats") {
  std::vector<ReportRow> rows{{"mux", 2, "micro", "speedup", 1.5}, {"a,b", 1, "micro", "acc", 0.25}};
  CHECK(to_csv(rows) == "model,N,size,metric,value\nmux,2,micro,speedup,1.5\n\"a,b\",1,micro,acc,0.25\n");
  CHECK(to_jsonl(rows) ==
        "{\"N\":2,\"metric\":\"speedup\",\"model\":\"mux\",\"size\":\"micro\",\"value\":1.5}\n"
        "{\"N\":1,\"metric\":\"acc\",\"model\":\"a,b\",\"size\":\"micro\",\"value\":0.25}\n");

  const auto path = std::filesystem::temp_directory_path() / "muxplm_points.csv";
  {
    std::ofstream out(path);
    out << "label,throughput,accuracy\r\nbert,1,80\n\"mux, N=2\",2,75\n\nmux5,3,85\n";
  }
  const auto pts = read_points_csv(path);
  REQUIRE(pts.size() == 3);
  CHECK(pts[1].label == "mux, N=2");
  CHECK(pts[2].throughput == 3.0);
  const auto front = pareto_frontier(pts);
  CHECK(points_csv(front) == "throughput,accuracy,label\n3,85,mux5\n");
  const auto svg = pareto_svg(pts, front);
  CHECK(svg.rfind("<svg", 0) == 0);
  std::size_t circles = 0;
  for (auto pos = svg.find("<circle"); pos != std::string::npos; pos = svg.find("<circle", pos + 1)) ++circles;
  CHECK(circles == 3);

  {
    std::ofstream out(path);
    out << "speed,accuracy\n1,2\n";
  }
  CHECK_THROWS_AS(read_points_csv(path), FormatError);
  {
    std::ofstream out(path);
    out << "throughput,accuracy\n1,abc\n";
  }
  CHECK_THROWS_AS(read_points_csv(path), FormatError);
  std::filesystem::remove(path);
}
