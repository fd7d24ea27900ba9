// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "mrsnet/attention.hpp"
#include "mrsnet/checkpoint.hpp"
#include "mrsnet/cross_modal_align.hpp"
#include "mrsnet/errors.hpp"
#include "mrsnet/harness.hpp"
#include "mrsnet/hfim.hpp"
#include "mrsnet/metrics.hpp"
#include "mrsnet/network.hpp"
#include "mrsnet/spatial_relations.hpp"
#include "mrsnet/spectral_pyramid.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace mrsnet;

namespace {

using Clock = std::chrono::steady_clock;

// Collects failed sub-checks; the criterion passes when none failed.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok) failures_.push_back(what);
  }
  bool ok() const { return failures_.empty(); }
  std::string detail() const {
    std::ostringstream s;
    s << (total_ - failures_.size()) << "/" << total_ << " checks";
    for (std::size_t i = 0; i < failures_.size() && i < 5; ++i) s << "; failed: " << failures_[i];
    return s.str();
  }
  void note(const std::string& n) { notes_ += (notes_.empty() ? "" : ", ") + n; }
  const std::string& notes() const { return notes_; }

 private:
  std::size_t total_ = 0;
  std::vector<std::string> failures_;
  std::string notes_;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

NetworkConfig tiny_model() {
  NetworkConfig c;
  c.stage_dims = {8, 16, 32, 64};
  c.hfim_dims = {4, 8, 16, 32};
  c.text_dim = 16;
  c.max_tokens = 8;
  return c;
}

TrainConfig tiny_train(const std::filesystem::path& out) {
  TrainConfig c;
  c.model = tiny_model();
  c.image_size = 128;
  c.batch_size = 8;
  c.output_dir = out.string();
  return c;
}

DatasetIndex synthetic(const std::filesystem::path& dir, std::size_t samples, std::uint64_t seed) {
  SyntheticOptions o;
  o.samples = samples;
  o.size = 128;
  o.seed = seed;
  return load_dataset({}, write_synthetic_dataset(dir, o));
}

LanguageSequence language(Rng& rng, std::int64_t dim, std::int64_t tokens, std::int64_t valid) {
  LanguageSequence l;
  l.features = uniform_tensor({1, dim, tokens}, -1, 1, rng);
  l.mask = Tensor({1, tokens}, 0.0);
  for (std::int64_t j = 0; j < valid; ++j) l.mask.data_mut()[j] = 1.0;
  return l;
}

void gradient_checks(Checks& c) {
  const auto t0 = Clock::now();
  Rng rng(101);
  auto run = [&](const std::string& name, const std::function<Tensor()>& loss,
                 const std::vector<std::pair<std::string, Tensor>>& wrt) {
    const auto r = testing::gradcheck(loss, wrt, 1e-4, 1e-6);
    c.expect(r.ok, name + " " + r.summary());
  };
  {
    PyramidalSpectralRefinement psr({8, {1, 2, 4}}, rng);
    auto x = testing::leaf({1, 8, 4, 4}, rng);
    auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
    run("psr", [&] { return ops::weighted_sum(psr.forward(x), probe); }, testing::with_params(psr, {{"x", x}}));
  }
  {
    GraphRefine g(8, rng);
    auto x = testing::leaf({1, 8, 16}, rng);
    const auto a = build_adjacency(4, 4);
    auto probe = testing::probe_weights({1, 8, 16}, rng);
    run("graph_refine", [&] { return ops::weighted_sum(g.forward(aggregate_context(x, a)), probe); },
        testing::with_params(g, {{"x", x}}));
  }
  {
    CrossModalAlign cma({8, 6, std::nullopt, 2}, rng);
    auto x = testing::leaf({1, 8, 4, 4}, rng);
    auto l = language(rng, 6, 4, 3);
    l.features.set_requires_grad(true);
    auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
    run("cma", [&] { return ops::weighted_sum(cma.forward(x, l), probe); },
        testing::with_params(cma, {{"x", x}, {"language", l.features}}));
  }
  {
    SpatialAttentionBranch att(8, 4, rng);
    auto x = testing::leaf({1, 8, 4, 4}, rng);
    auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
    run("hfim_spatial", [&] { return ops::weighted_sum(att.forward(x), probe); }, testing::with_params(att, {{"x", x}}));
  }
  {
    FrequencyAttentionBranch fa(8, 4, rng);
    auto x = testing::leaf({1, 8, 4, 4}, rng);
    auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
    run("hfim_frequency", [&] { return ops::weighted_sum(fa.forward(x), probe); }, testing::with_params(fa, {{"x", x}}));
  }
  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 120.0, "total time " + fmt(elapsed) + " s");
  c.note(fmt(elapsed, 1) + " s");
}

void exactness(Checks& c) {
  Rng rng(7);
  for (int f : {2, 4, 8}) {
    auto x = normal_tensor({2, 3, 16, 16}, 1e3, rng);
    const auto back = depth_to_space(space_to_depth(x, f), f);
    const auto a = x.data(), b = back.data();
    c.expect(std::equal(a.begin(), a.end(), b.begin(), b.end()), "s2d/d2s factor " + std::to_string(f));
  }

  double worst_fft = 0.0;
  for (int h = 1; h <= 32; h += 3)
    for (int w = 1; w <= 32; w += 5) {
      auto x = uniform_tensor({1, 2, h, w}, -1, 1, rng);
      const auto y = spectral_reconstruct(fft_decompose(x));
      const auto xd = x.data(), yd = y.data();
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < xd.size(); ++i) {
        num = std::max(num, std::abs(xd[i] - yd[i]));
        den = std::max(den, std::abs(xd[i]));
      }
      worst_fft = std::max(worst_fft, num / den);
    }
  c.expect(worst_fft <= 1e-5, "fft round trip rel err " + std::to_string(worst_fft));

  double worst_row = 0.0;
  for (int h = 1; h <= 32; ++h)
    for (int w = 1; w <= 32; ++w) {
      if (h * w == 1) continue;  // single node has no neighbours
      const auto a = build_adjacency(h, w);
      for (std::int64_t r = 0; r < a.size(); ++r) worst_row = std::max(worst_row, std::abs(a.row_sum(r) - 1.0));
    }
  c.expect(worst_row <= 1e-6, "adjacency row sum err " + std::to_string(worst_row));

  double worst_att = 0.0;
  bool padding_zero = true;
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t nk = 2 + trial % 6, valid = 1 + trial % nk;
    auto q = uniform_tensor({2, 5, 8}, -3, 3, rng), k = uniform_tensor({2, nk, 8}, -3, 3, rng),
         v = uniform_tensor({2, nk, 4}, -1, 1, rng);
    Tensor mask({2, nk}, 0.0);
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t j = 0; j < (b ? nk : valid); ++j) mask.data_mut()[b * nk + j] = 1.0;
    const auto att = multihead_attention(q, k, v, 2, mask);
    const auto w = att.weights.data();
    for (std::int64_t row = 0; row < 2 * 2 * 5; ++row) {
      const std::int64_t b = row / 10;
      double s = 0.0;
      for (std::int64_t j = 0; j < nk; ++j) {
        s += w[row * nk + j];
        if (mask.data()[b * nk + j] == 0.0 && w[row * nk + j] != 0.0) padding_zero = false;
      }
      worst_att = std::max(worst_att, std::abs(s - 1.0));
    }
  }
  {
    CrossModalAlign cma({8, 6, std::nullopt, 2}, rng);
    const auto l = language(rng, 6, 5, 2);
    const auto gated = cma.gate_language(l);
    const auto att = cma.cross_attend(cma.project_visual(uniform_tensor({1, 8, 3, 3}, -1, 1, rng)), gated, l.mask);
    const auto w = att.attention.data();
    for (std::int64_t row = 0; row < att.attention.numel() / 5; ++row) {
      double s = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) {
        s += w[row * 5 + j];
        if (j >= 2 && w[row * 5 + j] != 0.0) padding_zero = false;
      }
      worst_att = std::max(worst_att, std::abs(s - 1.0));
    }
  }
  c.expect(worst_att <= 1e-6, "attention row sum err " + std::to_string(worst_att));
  c.expect(padding_zero, "padding weight exactly zero");
}

void analytic_values(Checks& c) {
  Rng rng(3);
  {
    CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
    fill(cma.language_gate.weight, 0.0);
    fill(cma.language_gate.bias, 0.0);
    const auto g = cma.gate_language(language(rng, 6, 4, 4));
    bool half = true;
    for (double v : g.gate.data()) half = half && v == 0.5;
    c.expect(half, "sigmoid(0) gate is 0.5");
  }
  for (std::int64_t dim : {4, 8}) {
    SpatialSpectralRefine ssr(dim, rng);
    fill(ssr.weight_conv.weight, 0.0);
    fill(ssr.weight_conv.bias, 0.0);
    const auto d = ssr.forward_detail(uniform_tensor({1, dim, 4, 4}, -2, 2, rng));
    double worst = 0.0;
    for (double v : d.weights.data()) worst = std::max(worst, std::abs(v - 1.0 / static_cast<double>(dim)));
    c.expect(worst <= 1e-12, "W_f = 1/" + std::to_string(dim));
  }
  {
    const Tensor zeros({1, 1, 3, 3}, 0.0);
    Tensor target({1, 1, 3, 3}, 0.0);
    for (int i = 0; i < 9; i += 2) target.data_mut()[i] = 1.0;
    const double bce = ops::bce_with_logits(zeros, target).item();
    c.expect(std::abs(bce - std::log(2.0)) <= 1e-9, "BCE(p=0.5) = ln 2");
  }
  c.expect(std::abs(cosine_lr(6e-4, 500, 1000) - 3e-4) <= 1e-9, "lr(T/2) = 3e-4");
  c.expect(std::abs(cosine_lr(6e-4, 0, 1000) - 6e-4) <= 1e-12, "lr(0) = 6e-4");
  c.expect(cosine_lr(6e-4, 1000, 1000) <= 1e-9, "lr(T) ~ 0");
  {
    const auto a = build_adjacency(2, 2);
    bool third = a.nonzeros() == 12;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) third = third && std::abs(a.at(i, j) - (i == j ? 0.0 : 1.0 / 3.0)) <= 1e-15;
    c.expect(third, "2x2 adjacency weights 1/3");
  }
}

void metric_oracle(Checks& c) {
  std::mt19937_64 gen(99);
  std::uniform_int_distribution<int> side(1, 8);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  const std::vector<double> thresholds{0.5, 0.6, 0.7, 0.8, 0.9};
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<EvalRecord> records;
    std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
    for (int s = 0; s < 50; ++s) {
      const int h = side(gen), w = side(gen);
      BinaryMask pred(h, w), gt(h, w);
      const double dp = s % 9 == 0 ? 0.0 : dens(gen), dg = s % 7 == 0 ? 0.0 : dens(gen);
      std::bernoulli_distribution bp(dp), bg(dg);
      std::int64_t inter = 0, uni = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          pred.at(y, x) = bp(gen);
          gt.at(y, x) = bg(gen);
          inter += pred.at(y, x) && gt.at(y, x);
          uni += pred.at(y, x) || gt.at(y, x);
        }
      const auto rec = sample_iou(pred, gt);
      c.expect(rec.intersection == inter && rec.union_ == uni, "per-sample counts");
      records.push_back(rec);
      pairs.emplace_back(inter, uni);
    }
    const auto r = aggregate(records, thresholds);
    std::int64_t si = 0, su = 0;
    double iou_sum = 0.0;
    for (const auto& [i, u] : pairs) {
      si += i;
      su += u;
      iou_sum += u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
    }
    c.expect(r.total_intersection == si && r.total_union == su, "aggregate counts");
    c.expect(std::abs(r.miou - 100.0 * iou_sum / 50.0) <= 1e-9, "mIoU");
    c.expect(std::abs(r.oiou - (su == 0 ? 100.0 : 100.0 * si / static_cast<double>(su))) <= 1e-9, "oIoU");
    double previous = 101.0;
    for (int k = 5; k <= 9; ++k) {
      int hits = 0;
      for (const auto& [i, u] : pairs) hits += u == 0 ? 1 : 10 * i >= k * u;
      const double p = r.precision_at(k / 10.0);
      c.expect(std::abs(p - 100.0 * hits / 50.0) <= 1e-9, "P@0." + std::to_string(k));
      c.expect(p <= previous, "P@t monotone");
      previous = p;
    }
  }
}

void shape_and_wiring(Checks& c) {
  {
    MrsNet net(NetworkConfig{});
    Rng rng(5);
    NoGradGuard no_grad;
    ForwardTrace trace;
    const auto out = net.forward(uniform_tensor({1, 3, 256, 256}, 0, 1, rng), {"the white airplane"}, &trace);
    c.expect(out.logits.shape() == Shape{1, 1, 256, 256}, "logits (1,1,256,256)");
    const std::vector<Shape> expected{{1, 96, 64, 64}, {1, 192, 32, 32}, {1, 384, 16, 16}, {1, 768, 8, 8}};
    for (int s = 0; s < 4; ++s)
      for (const std::string prefix : {"encoder.stage", "ifim."}) {
        const auto name = prefix + std::to_string(s);
        bool found = false;
        for (const auto& [n, t] : trace.tensors)
          if (n == name) found = t.shape() == expected[s];
        c.expect(found, name + " shape");
      }
  }
  {
    MrsNet net(tiny_model());
    AdamW opt(net.named_parameters(), 0.9, 0.999, 1e-8, 0.01);
    Rng rng(6);
    Batch batch{uniform_tensor({1, 3, 128, 128}, 0, 1, rng), Tensor({1, 1, 128, 128}, 0.0), {"the purple windmill"}};
    bool finite = true;
    for (int step = 0; step < 2; ++step) finite = finite && std::isfinite(train_step(net, opt, batch, 6e-4, false, step));
    for (const auto& [name, p] : net.named_parameters())
      for (double v : p.data()) finite = finite && std::isfinite(v);
    c.expect(finite, "non-object sample trains");
  }
  {
    BinaryMask empty_pred(8, 8), empty_gt(8, 8);
    const auto r = sample_iou(empty_pred, empty_gt);
    c.expect(r.iou == 1.0, "empty prediction on empty target scores IoU 1");
    c.expect(aggregate({r}).miou == 100.0, "empty pair mIoU 100");
  }
}

void overfit(Checks& c, const testing::TempDir& dir) {
  const auto t0 = Clock::now();
  auto data = synthetic(dir / "overfit", 8, 1);
  std::map<std::string, std::vector<std::string>> splits{{"train", {}}, {"val", {}}, {"test", {}}};
  for (const auto& r : data.records()) splits["train"].push_back(r.id);
  data.set_splits(splits);

  auto config = tiny_train(dir / "overfit_a");
  config.seed = 1;
  config.max_steps = 120;
  config.epochs = 120;
  config.eval_every = 120;
  const auto a = train(config, data);
  config.output_dir = (dir / "overfit_b").string();
  const auto b = train(config, data);

  const auto model = load_model(a.last_checkpoint);
  const auto report =
      aggregate(evaluate_records(*model.model, data, splits["train"], config.image_size, config.model.threshold));
  c.expect(a.steps <= 200, "at most 200 steps");
  c.expect(report.miou >= 90.0, "train mIoU " + fmt(report.miou) + " >= 90.00");
  c.expect(a.losses == b.losses, "identical loss curves");
  const auto ta = read_checkpoint(a.last_checkpoint).tensors, tb = read_checkpoint(b.last_checkpoint).tensors;
  bool same = ta.size() == tb.size();
  for (std::size_t i = 0; same && i < ta.size(); ++i) {
    const auto x = ta[i].second.data(), y = tb[i].second.data();
    same = ta[i].first == tb[i].first && std::equal(x.begin(), x.end(), y.begin(), y.end());
  }
  c.expect(same, "identical weights");
  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 600.0, "time " + fmt(elapsed) + " s");
  c.note("mIoU " + fmt(report.miou) + " after " + std::to_string(a.steps) + " steps, " + fmt(elapsed, 0) + " s");
}

void protocol(Checks& c, const testing::TempDir& dir) {
  const auto data = synthetic(dir / "protocol", 10, 2);
  const auto split = stratified_split(data, {0.7, 0.1, 0.2}, 0);
  c.expect(split.split("train").size() == 7 && split.split("val").size() == 1 && split.split("test").size() == 2,
           "10 samples split (7,1,2)");

  MrsNet model(tiny_model());
  const auto report = evaluate(model, split, "test", 128, 0.5);
  std::vector<std::string> names;
  for (const auto& [name, v] : report.columns()) names.push_back(name);
  c.expect(names == std::vector<std::string>{"P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU"}, "report columns");
  std::vector<std::string> json_keys;
  const auto j = report.to_json();
  for (const auto& [k, v] : j.items()) json_keys.push_back(k);
  c.expect(json_keys == names, "report JSON key order");

  bool empty_raises = false;
  auto no_val = split;
  auto parts = no_val.splits();
  for (const auto& id : parts["val"]) parts["train"].push_back(id);
  parts["val"].clear();
  no_val.set_splits(parts);
  try {
    evaluate(model, no_val, "val", 128, 0.5);
  } catch (const ValidationError&) {
    empty_raises = true;
  }
  c.expect(empty_raises, "empty split raises");

  auto config = tiny_train(dir / "ablate");
  config.max_steps = 1;
  const auto rows = ablate(config, split);
  c.expect(rows.size() == 3, "ablate emits 3 rows");
  const std::vector<std::pair<bool, bool>> grid{{true, false}, {false, true}, {true, true}};
  for (std::size_t i = 0; i < rows.size() && i < 3; ++i) {
    c.expect(rows[i].use_psr == grid[i].first && rows[i].use_csr == grid[i].second, "row order");
    const auto header = read_checkpoint(rows[i].checkpoint).header;
    c.expect(header["model"]["use_psr"] == grid[i].first && header["model"]["use_csr"] == grid[i].second,
             "checkpoint records flags");
  }
}

void ablation_wiring(Checks& c) {
  for (const std::string branch : {"psr", "csr"}) {
    auto cfg = tiny_model();
    (branch == "psr" ? cfg.use_psr : cfg.use_csr) = false;
    MrsNet net(cfg);
    std::map<std::string, std::vector<double>> before;
    std::size_t branch_params = 0, other_with_grad = 0;
    for (const auto& [name, p] : net.named_parameters()) before[name].assign(p.data().begin(), p.data().end());
    AdamW opt(net.named_parameters(), 0.9, 0.999, 1e-8, 0.01);
    Rng rng(8);
    Batch batch{uniform_tensor({2, 3, 128, 128}, 0, 1, rng), Tensor({2, 1, 128, 128}, 0.0), {"the car", "a ship"}};
    batch.masks.data_mut()[100] = 1.0;
    train_step(net, opt, batch, 6e-4, false, 0);
    bool clean = true;
    for (const auto& [name, p] : net.named_parameters()) {
      if (name.find("." + branch + ".") == std::string::npos) {
        other_with_grad += p.has_grad();
        continue;
      }
      ++branch_params;
      const auto now = p.data();
      clean = clean && !p.has_grad() && std::equal(now.begin(), now.end(), before[name].begin(), before[name].end());
    }
    c.expect(branch_params > 0, branch + " parameters exist");
    c.expect(clean, "use_" + branch + "=false leaves " + branch + " parameters without gradient or update");
    c.expect(other_with_grad > 0, "other parameters still train");
  }
}

}  // namespace

int main() {
  testing::TempDir dir("acceptance");
  const std::vector<std::pair<std::string, std::function<void(Checks&)>>> criteria{
      {"gradient checks", gradient_checks},
      {"exactness", exactness},
      {"analytic values", analytic_values},
      {"metric oracle", metric_oracle},
      {"shape and wiring", shape_and_wiring},
      {"overfit", [&](Checks& c) { overfit(c, dir); }},
      {"protocol", [&](Checks& c) { protocol(c, dir); }},
      {"ablation wiring", ablation_wiring},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Checks checks;
    std::string error;
    try {
      criteria[i].second(checks);
    } catch (const std::exception& e) {
      error = e.what();
    }
    const bool ok = error.empty() && checks.ok();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << checks.detail();
    if (!checks.notes().empty()) std::cout << " (" << checks.notes() << ")";
    if (!error.empty()) std::cout << "; exception: " << error;
    std::cout << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
