#include "muxplm/benchlab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

namespace {

double sample_std(std::span<const double> v, double mean) {
  if (v.size() < 2) return 0.0;
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

ThroughputReport measure_throughput(const std::string& model_id, std::size_t n, const ThroughputOptions& options,
                                    const std::function<void(std::size_t)>& forward) {
  if (options.n_batches == 0) throw ValueError("throughput: n_batches must be positive");
  if (options.trials == 0) throw ValueError("throughput: trials must be positive");
  if (options.batch == 0 || options.seq_len == 0 || n == 0) throw ValueError("throughput: batch, seq_len and N must be positive");
  ThroughputReport r;
  r.model_id = model_id;
  r.n = n;
  r.batch = options.batch;
  r.seq_len = options.seq_len;
  for (std::size_t i = 0; i < options.warmup_batches; ++i) forward(i);
  using clock = std::chrono::steady_clock;
  const double samples = static_cast<double>(options.batch * n * options.n_batches);
  for (std::size_t t = 0; t < options.trials; ++t) {
    const auto start = clock::now();
    for (std::size_t i = 0; i < options.n_batches; ++i) forward(i);
    const std::chrono::duration<double> elapsed = clock::now() - start;
    r.trials.push_back(samples / std::max(elapsed.count(), 1e-12));
  }
  r.mean = mean_of(r.trials);
  r.std = sample_std(r.trials, r.mean);
  return r;
}

ThroughputReport measure_model_throughput(const MuxModel<float>& model, const std::string& model_id,
                                          const ThroughputOptions& options, std::uint64_t seed) {
  const std::size_t N = model.n(), B = options.batch, L = options.seq_len;
  Rng rng(seed);
  std::vector<std::int32_t> tokens(B * N * L);
  for (std::size_t s = 0; s < B * N; ++s) {
    tokens[s * L] = vocab::kCls;
    for (std::size_t j = 1; j < L; ++j) tokens[s * L + j] = static_cast<std::int32_t>(rng.below(256));
  }
  ModelForwardOptions fopts;
  return measure_throughput(model_id, N, options, [&](std::size_t) {
    auto out = model_forward(model, tokens, B, L, fopts);
    if (!out.demuxed.defined()) throw Error("throughput: empty forward output");
  });
}

Speedup speedup(const ThroughputReport& report, const ThroughputReport& baseline) {
  if (!(report.mean > 0.0) || !(baseline.mean > 0.0)) throw ValueError("speedup: throughput means must be positive");
  Speedup s;
  s.ratio = report.mean / baseline.mean;
  const double a = report.std / report.mean, b = baseline.std / baseline.mean;
  s.std = s.ratio * std::sqrt(a * a + b * b);
  return s;
}

std::vector<ParetoPoint> pareto_frontier(std::span<const ParetoPoint> points) {
  if (points.empty()) throw ValueError("pareto_frontier: no points");
  for (const auto& p : points) {
    if (!(p.throughput > 0.0) || !std::isfinite(p.throughput)) throw ValueError("pareto_frontier: throughput must be positive and finite");
    if (!std::isfinite(p.accuracy)) throw ValueError("pareto_frontier: accuracy must be finite");
  }
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return points[a].throughput < points[b].throughput; });

  // Sweep from the fastest group down; a point survives unless a strictly
  // faster one is strictly more accurate.
  std::vector<std::uint8_t> keep(points.size(), 0);
  double best_faster = -std::numeric_limits<double>::infinity();
  std::size_t hi = order.size();
  while (hi > 0) {
    std::size_t lo = hi - 1;
    while (lo > 0 && points[order[lo - 1]].throughput == points[order[hi - 1]].throughput) --lo;
    double group_best = best_faster;
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& p = points[order[k]];
      keep[order[k]] = !(best_faster > p.accuracy);
      group_best = std::max(group_best, p.accuracy);
    }
    best_faster = group_best;
    hi = lo;
  }
  std::vector<ParetoPoint> out;
  for (auto i : order) {
    if (keep[i]) out.push_back(points[i]);
  }
  return out;
}

double attention_entropy(std::span<const float> probs, std::size_t rows, std::size_t heads, std::size_t len,
                         std::span<const std::uint8_t> key_valid) {
  if (probs.size() != rows * heads * len * len || key_valid.size() != rows * len) {
    throw DimensionError("attention_entropy: buffers do not match [" + std::to_string(rows) + "x" + std::to_string(heads) + "x" +
                         std::to_string(len) + "x" + std::to_string(len) + "]");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < rows; ++p) {
    const auto* valid = key_valid.data() + p * len;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t q = 0; q < len; ++q) {
        if (!valid[q]) continue;
        const float* a = probs.data() + ((p * heads + h) * len + q) * len;
        double mass = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
          if (valid[k]) mass += a[k];
        }
        if (!(mass > 0.0)) continue;
        double e = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
          if (!valid[k] || a[k] <= 0.0f) continue;
          const double w = a[k] / mass;
          e -= w * std::log(w);
        }
        total += std::max(e, 0.0);
        ++count;
      }
    }
  }
  if (count == 0) throw ValueError("attention_entropy: no valid query positions");
  return total / static_cast<double>(count);
}

double mean_abs_activation(std::span<const float> hidden, std::size_t rows, std::size_t len, std::size_t width,
                           std::span<const std::uint8_t> valid) {
  if (hidden.size() != rows * len * width || valid.size() != rows * len) {
    throw DimensionError("mean_abs_activation: buffers do not match [" + std::to_string(rows) + "x" + std::to_string(len) + "x" +
                         std::to_string(width) + "]");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t pos = 0; pos < rows * len; ++pos) {
    if (!valid[pos]) continue;
    for (std::size_t c = 0; c < width; ++c) total += std::abs(static_cast<double>(hidden[pos * width + c]));
    count += width;
  }
  if (count == 0) throw ValueError("mean_abs_activation: no valid positions");
  return total / static_cast<double>(count);
}

MuxologyProfile muxology(const MuxModel<float>& model, const Dataset& sample, std::size_t seq_len, std::size_t groups_per_batch) {
  const std::size_t N = model.n(), layers = model.spec.config.num_layers, heads = model.spec.config.num_heads;
  const std::size_t d = model.spec.config.hidden_size;
  if (sample.size() == 0) throw ValueError("muxology: empty sample");
  if (sample.size() < N) throw ValueError("muxology: sample holds fewer than N=" + std::to_string(N) + " sequences");
  groups_per_batch = std::max<std::size_t>(1, groups_per_batch);
  const std::size_t groups = sample.size() / N;

  std::vector<double> act(layers, 0.0), ent(layers, 0.0);
  std::size_t batches = 0;
  ModelForwardOptions fopts;
  fopts.capture = true;
  for (std::size_t g0 = 0; g0 < groups; g0 += groups_per_batch) {
    const std::size_t B = std::min(groups_per_batch, groups - g0);
    std::vector<std::size_t> idx(B * N);
    std::iota(idx.begin(), idx.end(), g0 * N);
    const auto batch = assemble_batch(sample, idx, N, seq_len);
    const auto out = model_forward(model, batch.tokens, B, seq_len, fopts);
    const std::size_t Lx = out.encoder_len;
    for (std::size_t l = 0; l < layers; ++l) {
      act[l] += mean_abs_activation(out.encoder.per_layer_hidden.at(l).data(), B, Lx, d, out.encoder_mask) * static_cast<double>(B);
      ent[l] += attention_entropy(out.encoder.per_layer_attention.at(l).data(), B, heads, Lx, out.encoder_mask) * static_cast<double>(B);
    }
    batches += B;
  }
  MuxologyProfile p;
  p.samples = batches * N;
  for (std::size_t l = 0; l < layers; ++l) {
    p.activation.push_back(act[l] / static_cast<double>(batches));
    p.entropy.push_back(ent[l] / static_cast<double>(batches));
  }
  return p;
}

SeedSweepResult summarize_sweep(std::span<const std::uint64_t> seeds, std::span<const double> metrics) {
  if (seeds.empty()) throw ValueError("seed sweep: no seeds");
  if (seeds.size() != metrics.size()) throw DimensionError("seed sweep: one metric per seed required");
  SeedSweepResult r;
  r.seeds.assign(seeds.begin(), seeds.end());
  r.metrics.assign(metrics.begin(), metrics.end());
  r.mean = mean_of(metrics);
  r.std = sample_std(metrics, r.mean);
  r.max = *std::max_element(metrics.begin(), metrics.end());
  r.min = *std::min_element(metrics.begin(), metrics.end());
  r.delta = r.max - r.min;
  return r;
}

SeedSweepResult seed_sweep(std::span<const std::uint64_t> seeds, const std::function<double(std::uint64_t)>& trial) {
  std::vector<double> metrics;
  for (auto s : seeds) metrics.push_back(trial(s));
  return summarize_sweep(seeds, metrics);
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t"), e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? "" : f.substr(b, e - b + 1);
  }
  return out;
}

}  // namespace

std::string to_csv(std::span<const ReportRow> rows) {
  std::string s = "model,N,size,metric,value\n";
  for (const auto& r : rows) {
    s += csv_field(r.model) + "," + std::to_string(r.n) + "," + csv_field(r.size) + "," + csv_field(r.metric) + "," + fmt(r.value) + "\n";
  }
  return s;
}

std::string to_jsonl(std::span<const ReportRow> rows) {
  std::string s;
  for (const auto& r : rows) {
    s += nlohmann::json{{"model", r.model}, {"N", r.n}, {"size", r.size}, {"metric", r.metric}, {"value", r.value}}.dump() + "\n";
  }
  return s;
}

std::string throughput_jsonl(const ThroughputReport& r) {
  return nlohmann::json{{"model", r.model_id}, {"N", r.n},       {"batch", r.batch}, {"seq_len", r.seq_len},
                        {"trials", r.trials},  {"mean", r.mean}, {"std", r.std}}
             .dump() +
         "\n";
}

std::vector<ParetoPoint> read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open points file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty points file");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto ct = column("throughput"), ca = column("accuracy"), cl = column("label");
  if (ct < 0 || ca < 0) throw FormatError(path.string() + ": header must name 'throughput' and 'accuracy' columns");
  std::vector<ParetoPoint> pts;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    const auto need = static_cast<std::size_t>(std::max({ct, ca, cl})) + 1;
    if (f.size() < need) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": too few columns");
    ParetoPoint p;
    try {
      std::size_t used = 0;
      p.throughput = std::stod(f[ct], &used);
      if (used != f[ct].size()) throw std::invalid_argument("trailing");
      p.accuracy = std::stod(f[ca], &used);
      if (used != f[ca].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-numeric throughput or accuracy");
    }
    if (cl >= 0) p.label = f[cl];
    pts.push_back(std::move(p));
  }
  return pts;
}

std::string points_csv(std::span<const ParetoPoint> points) {
  std::string s = "throughput,accuracy,label\n";
  for (const auto& p : points) s += fmt(p.throughput) + "," + fmt(p.accuracy) + "," + csv_field(p.label) + "\n";
  return s;
}

std::string pareto_svg(std::span<const ParetoPoint> points, std::span<const ParetoPoint> frontier) {
  const double W = 480, H = 360, M = 48;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.throughput), x1 = std::max(x1, p.throughput);
    y0 = std::min(y0, p.accuracy), y1 = std::max(y1, p.accuracy);
  }
  if (points.empty()) x0 = y0 = 0, x1 = y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto X = [&](double v) { return M + (v - x0) / (x1 - x0) * (W - 2 * M); };
  auto Y = [&](double v) { return H - M - (v - y0) / (y1 - y0) * (H - 2 * M); };
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">throughput (samples/s)</text>\n";
  s << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2
    << ")\" text-anchor=\"middle\" font-size=\"12\">accuracy</text>\n";
  if (!frontier.empty()) {
    s << "<polyline fill=\"none\" stroke=\"crimson\" points=\"";
    for (const auto& p : frontier) s << X(p.throughput) << "," << Y(p.accuracy) << " ";
    s << "\"/>\n";
  }
  for (const auto& p : points) {
    s << "<circle cx=\"" << X(p.throughput) << "\" cy=\"" << Y(p.accuracy) << "\" r=\"3\" fill=\"steelblue\"><title>" << xml_escape(p.label)
      << "</title></circle>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace muxplm
