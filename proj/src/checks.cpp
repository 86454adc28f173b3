#include "segnetr/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "segnetr/layout.hpp"
#include "segnetr/nn.hpp"
#include "segnetr/ops.hpp"
#include "segnetr/optim.hpp"

namespace segnetr::checks {

std::string format(const CheckResult& r) {
  return std::string(r.passed ? "PASS " : "FAIL ") + r.name + (r.detail.empty() ? "" : "  " + r.detail);
}

bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
}

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// Values 1..n in flat order, so every element names its source position.
Tensor<double> index_tensor(Shape shape) {
  Tensor<double> t(std::move(shape));
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(i + 1);
  return t;
}

bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data(), y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

std::vector<double> sorted_values(const Tensor<double>& t, bool drop_zero = false) {
  std::vector<double> v;
  for (double x : t.data())
    if (!drop_zero || x != 0) v.push_back(x);
  std::sort(v.begin(), v.end());
  return v;
}

// Random [H,W,C] or [N,H,W,C] with H, W multiples of `unit`.
Shape random_map_shape(Rng& rng, std::size_t unit, std::size_t max_mult = 4) {
  const std::size_t H = unit * pick(rng, 1, max_mult), W = unit * pick(rng, 1, max_mult), C = pick(rng, 1, 3);
  if (pick(rng, 0, 1)) return Shape{pick(rng, 1, 2), H, W, C};
  return Shape{H, W, C};
}

struct MapDims {
  std::size_t N, H, W, C;
};
MapDims dims_of(const Shape& s) {
  return s.size() == 4 ? MapDims{s[0], s[1], s[2], s[3]} : MapDims{1, s[0], s[1], s[2]};
}

// The displacement rule applied literally: horizontal pass by row parity,
// then vertical pass by the new column parity, cyclic on both axes.
void displaced_cell(std::size_t r, std::size_t c, std::size_t rows, std::size_t cols, std::size_t& r1,
                    std::size_t& c1) {
  c1 = (r % 2 ? c + cols - 1 : c + 1) % cols;
  r1 = (c1 % 2 ? r + rows - 1 : r + 1) % rows;
}

struct Tally {
  explicit Tally(std::string n) : name(std::move(n)) {}
  std::string name;
  std::size_t cases = 0;
  std::string failure;
  void fail(const std::string& why) {
    if (failure.empty()) failure = why;
  }
  CheckResult result() const {
    return {name, failure.empty(), failure.empty() ? std::to_string(cases) + " cases" : failure};
  }
};

}  // namespace

// -------------------- layout suite --------------------

std::vector<CheckResult> layout_suite(std::uint64_t seed, std::size_t cases) {
  std::vector<CheckResult> out;
  Rng rng(seed);

  for (std::size_t P : {1, 2, 4, 8}) {
    Tally t{"local_partition/local_reverse round trip P=" + std::to_string(P)};
    for (std::size_t i = 0; i < cases; ++i, ++t.cases) {
      const auto shape = random_map_shape(rng, P);
      auto x = random_tensor<double>(rng, shape);
      auto ws = layout::local_partition(x, P);
      if (!bitwise_equal(layout::local_reverse(ws), x)) t.fail("round trip differs for " + to_string(shape));
      if (sorted_values(ws.windows) != sorted_values(x)) t.fail("value multiset changed for " + to_string(shape));
      // placement: (n,i,j,k) -> window (n, i/P, j/P) offset (i%P, j%P)
      const auto d = dims_of(shape);
      auto idx = index_tensor(shape);
      const auto iws = layout::local_partition(idx, P);
      auto iw = iws.windows.data();
      const std::size_t cols = d.W / P, wpi = (d.H / P) * cols;
      for (std::size_t n = 0; n < d.N; ++n)
        for (std::size_t a = 0; a < d.H; ++a)
          for (std::size_t b = 0; b < d.W; ++b)
            for (std::size_t k = 0; k < d.C; ++k) {
              const std::size_t w = n * wpi + (a / P) * cols + b / P;
              const std::size_t pos = ((w * P + a % P) * P + b % P) * d.C + k;
              const double expect = static_cast<double>(((n * d.H + a) * d.W + b) * d.C + k + 1);
              if (iw[pos] != expect) t.fail("element misplaced for " + to_string(shape));
            }
    }
    out.push_back(t.result());
  }

  for (std::size_t P : {1, 2, 4, 8}) {
    Tally t{"global_partition/global_reverse round trip P=" + std::to_string(P)};
    for (std::size_t i = 0; i < cases; ++i, ++t.cases) {
      const auto shape = random_map_shape(rng, 2 * P, 3);
      auto x = random_tensor<double>(rng, shape);
      auto ws = layout::global_partition(x, P);
      if (!ws.displaced) t.fail("stack not flagged as displaced");
      if (!bitwise_equal(layout::global_reverse(ws), x)) t.fail("round trip differs for " + to_string(shape));
      if (sorted_values(ws.windows) != sorted_values(x)) t.fail("value multiset changed for " + to_string(shape));
      const layout::DisplacementSpec spec{P};
      if (!bitwise_equal(layout::displace_inverse(layout::displace(x, spec), spec), x))
        t.fail("displace inverse differs for " + to_string(shape));
      if (!bitwise_equal(ws.windows, layout::local_partition(layout::displace(x, spec), 2 * P).windows))
        t.fail("global partition is not local_partition(displace(x), 2P) for " + to_string(shape));
    }
    out.push_back(t.result());
  }

  {
    Tally t{"displacement matches the two-pass rule"};
    for (std::size_t P : {1, 2, 4})
      for (std::size_t rows = 1; rows <= 5; ++rows)
        for (std::size_t cols = 1; cols <= 5; ++cols, ++t.cases) {
          const Shape shape{rows * P, cols * P, 2};
          auto x = index_tensor(shape);
          const auto yt = layout::displace(x, layout::DisplacementSpec{P});
          auto y = yt.data();
          auto xd = x.data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              std::size_t r1, c1;
              displaced_cell(r, c, rows, cols, r1, c1);
              for (std::size_t a = 0; a < P; ++a)
                for (std::size_t b = 0; b < P; ++b)
                  for (std::size_t k = 0; k < 2; ++k) {
                    const auto src = ((r * P + a) * cols * P + c * P + b) * 2 + k;
                    const auto dst = ((r1 * P + a) * cols * P + c1 * P + b) * 2 + k;
                    if (y[dst] != xd[src])
                      t.fail("patch (" + std::to_string(r) + "," + std::to_string(c) + ") on " + std::to_string(rows) +
                             "x" + std::to_string(cols) + " grid, P=" + std::to_string(P));
                  }
            }
        }
    out.push_back(t.result());
  }

  {
    Tally t{"displacement non-vacuity (every global window spans >= 2 source blocks)"};
    for (std::size_t P : {1, 2, 4, 8})
      for (std::size_t R = 2; R <= 5; ++R)
        for (std::size_t Cb = 2; Cb <= 5; ++Cb, ++t.cases) {
          const std::size_t H = 2 * P * R, W = 2 * P * Cb;
          auto ws = layout::global_partition(index_tensor(Shape{H, W, 1}), P);
          const std::size_t area = 4 * P * P;
          auto v = ws.windows.data();
          for (std::size_t w = 0; w < ws.grid.num_windows(); ++w) {
            std::set<std::size_t> blocks;
            for (std::size_t e = 0; e < area; ++e) {
              const auto flat = static_cast<std::size_t>(v[w * area + e]) - 1;
              blocks.insert((flat / W) / (2 * P) * Cb + (flat % W) / (2 * P));
            }
            if (blocks.size() < 2)
              t.fail("window " + std::to_string(w) + " of " + std::to_string(H) + "x" + std::to_string(W) +
                     " P=" + std::to_string(P) + " draws from a single block");
          }
        }
    out.push_back(t.result());
  }

  for (std::size_t P : {1, 2, 4, 8}) {
    Tally t{"patch_merge/patch_reverse round trip, extents multiple of 2P, P=" + std::to_string(P)};
    for (std::size_t i = 0; i < cases; ++i, ++t.cases) {
      const auto shape = random_map_shape(rng, 2 * P, 2);
      auto x = random_tensor<double>(rng, shape);
      auto pm = layout::patch_merge(x);
      if (!bitwise_equal(layout::patch_reverse(pm), x)) t.fail("round trip differs for " + to_string(shape));
      if (sorted_values(pm) != sorted_values(x)) t.fail("value multiset changed for " + to_string(shape));
      const auto d = dims_of(shape);
      const auto pmi = layout::patch_merge(index_tensor(shape));
      auto idx = pmi.data();
      for (std::size_t n = 0; n < d.N; ++n)
        for (std::size_t a = 0; a < d.H / 2; ++a)
          for (std::size_t b = 0; b < d.W / 2; ++b)
            for (std::size_t k = 0; k < d.C; ++k)
              for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj) {
                  const auto pos = ((n * (d.H / 2) + a) * (d.W / 2) + b) * 4 * d.C + 4 * k + 2 * di + dj;
                  const auto src = ((n * d.H + 2 * a + di) * d.W + 2 * b + dj) * d.C + k + 1;
                  if (idx[pos] != static_cast<double>(src)) t.fail("patch_merge index map broken for " + to_string(shape));
                }
    }
    out.push_back(t.result());
  }

  {
    Tally t{"alternate_select keeps even channels; IRSC chain index map"};
    for (std::size_t i = 0; i < cases; ++i, ++t.cases) {
      const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4), C = 2 * pick(rng, 1, 3);
      const Shape shape{2 * h, 2 * w, C};
      auto x = index_tensor(shape);
      auto pm = layout::patch_merge(x);
      auto sel = layout::alternate_select(pm);
      auto pmd = pm.data(), sd = sel.data();
      for (std::size_t p = 0; p < h * w; ++p)
        for (std::size_t m = 0; m < 2 * C; ++m)
          if (sd[p * 2 * C + m] != pmd[p * 4 * C + 2 * m]) t.fail("alternate_select kept the wrong channel");
      auto pr = layout::patch_reverse(sel);
      if (pr.shape() != Shape{2 * h, 2 * w, C / 2}) t.fail("IRSC chain shape " + to_string(pr.shape()));
      auto prd = pr.data();
      // x_pr[2i+di, 2j+dj, k] = pm[i, j, 2(4k + 2di + dj)] = x at merged channel 8k+4di+2dj
      for (std::size_t a = 0; a < 2 * h; ++a)
        for (std::size_t b = 0; b < 2 * w; ++b)
          for (std::size_t k = 0; k < C / 2; ++k) {
            const std::size_t q = 2 * (4 * k + 2 * (a % 2) + b % 2);  // channel of pm
            const std::size_t src_c = q / 4, sdi = (q % 4) / 2, sdj = q % 2;
            const auto src = ((2 * (a / 2) + sdi) * 2 * w + 2 * (b / 2) + sdj) * C + src_c + 1;
            if (prd[(a * 2 * w + b) * (C / 2) + k] != static_cast<double>(src)) t.fail("IRSC element mispredicted");
          }
    }
    out.push_back(t.result());
  }

  {
    Tally t{"padded partitions on non-divisible extents round trip"};
    layout::PartitionOptions opt{true, layout::ParityRule::cross_axis};
    for (std::size_t i = 0; i < cases; ++i, ++t.cases) {
      const std::size_t P = pick(rng, 1, 4);
      const Shape shape{P * pick(rng, 1, 5), P * pick(rng, 1, 5), pick(rng, 1, 3)};
      auto x = index_tensor(shape);
      auto lp = layout::local_partition(x, P + 1, opt);
      if (!bitwise_equal(layout::local_reverse(lp), x)) t.fail("padded local round trip for " + to_string(shape));
      auto gp = layout::global_partition(x, P, opt);
      if (!bitwise_equal(layout::global_reverse(gp), x)) t.fail("padded global round trip for " + to_string(shape));
      if (sorted_values(gp.windows, true) != sorted_values(x)) t.fail("padding altered values for " + to_string(shape));
    }
    out.push_back(t.result());
  }
  return out;
}

// -------------------- gradient checks --------------------

namespace {

template <typename T>
struct GradSuite {
  const GradcheckOptions& opt;
  Rng rng;
  std::vector<CheckResult> results;
  double affine_limit, limit, step;

  explicit GradSuite(const GradcheckOptions& o)
      : opt(o),
        rng(o.seed),
        affine_limit(o.f64 ? 1e-6 : 1e-2),
        limit(o.f64 ? 1e-3 : 5e-2),
        step(o.f64 ? 1e-4 : 1e-2) {}

  using Fn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

  // Loss = sum(fn(inputs) * R) with a fixed random R.
  GradCheckResult check_once(const Fn& fn, std::vector<Tensor<T>> inputs) {
    Tensor<T> probe;
    {
      NoGradGuard g;
      probe = fn(inputs);
    }
    auto r = random_tensor<T>(rng, probe.shape());
    ScalarFn<T> loss = [&](const std::vector<Tensor<T>>& in) { return sum(mul(fn(in), r)); };
    return grad_check<T>(loss, std::move(inputs), step);
  }

  // Runs `make` for each seed; `make` builds inputs and the function.
  void run(const std::string& name, bool affine, std::size_t seeds,
           const std::function<std::pair<Fn, std::vector<Tensor<T>>>(Rng&)>& make) {
    const double lim = affine ? affine_limit : limit;
    double worst = 0;
    std::string where;
    std::size_t coords = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      auto [fn, inputs] = make(rng);
      auto res = check_once(fn, std::move(inputs));
      coords += res.coordinates;
      const double err = opt.f64 ? res.max_rel_error : res.norm_rel_error;
      if (err >= worst) {
        worst = err;
        where = res.worst;
      }
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s rel err %.3e (limit %.0e, %zu coords, %zu seeds%s%s)",
                  opt.f64 ? "max" : "norm", worst, lim, coords, seeds, opt.f64 ? ", worst " : "",
                  opt.f64 ? where.c_str() : "");
    results.push_back({"grad " + name, worst < lim, buf});
  }

  Shape small_shape(Rng& r, std::size_t rank, std::size_t lo = 1, std::size_t hi = 5) {
    Shape s(rank);
    for (auto& e : s) e = pick(r, lo, hi);
    return s;
  }

  void ops() {
    const std::size_t n = opt.op_seeds;
    using P = std::pair<Fn, std::vector<Tensor<T>>>;
    run("reshape", true, n, [&](Rng& r) {
      auto s = small_shape(r, 3);
      return P{[s](const auto& in) { return reshape(in[0], Shape{s[2], s[0] * s[1]}); }, {random_tensor<T>(r, s)}};
    });
    run("permute", true, n, [&](Rng& r) {
      std::vector<std::size_t> perm{0, 1, 2};
      std::shuffle(perm.begin(), perm.end(), r);
      return P{[perm](const auto& in) { return permute(in[0], perm); }, {random_tensor<T>(r, small_shape(r, 3))}};
    });
    run("slice", true, n, [&](Rng& r) {
      auto s = small_shape(r, 3, 2, 6);
      const std::size_t ax = pick(r, 0, 2), b = pick(r, 0, s[ax] - 1), e = pick(r, b + 1, s[ax]);
      return P{[=](const auto& in) { return slice(in[0], ax, b, e); }, {random_tensor<T>(r, s)}};
    });
    run("concat", true, n, [&](Rng& r) {
      auto s = small_shape(r, 3);
      auto s2 = s;
      const std::size_t ax = pick(r, 0, 2);
      s2[ax] = pick(r, 1, 4);
      return P{[ax](const auto& in) { return concat(std::vector<Tensor<T>>{in[0], in[1]}, ax); },
               {random_tensor<T>(r, s), random_tensor<T>(r, s2)}};
    });
    run("gather (with repeats and padding)", true, n, [&](Rng& r) {
      const std::size_t len = pick(r, 2, 12), outn = pick(r, 2, 16);
      auto idx = std::make_shared<std::vector<std::size_t>>(outn);
      for (auto& v : *idx) v = pick(r, 0, 5) == 0 ? kPadIndex : pick(r, 0, len - 1);
      std::shared_ptr<const std::vector<std::size_t>> ci = idx;
      return P{[ci, outn](const auto& in) { return gather(in[0], Shape{outn}, ci); },
               {random_tensor<T>(r, Shape{len})}};
    });
    auto broadcast_pair = [&](Rng& r) {
      auto a = small_shape(r, 3);
      auto b = a;
      for (auto& e : b)
        if (pick(r, 0, 1)) e = 1;
      if (pick(r, 0, 1)) b.erase(b.begin());
      return std::pair{random_tensor<T>(r, a), random_tensor<T>(r, b)};
    };
    run("add (broadcast)", true, n, [&](Rng& r) {
      auto [a, b] = broadcast_pair(r);
      return P{[](const auto& in) { return add(in[0], in[1]); }, {a, b}};
    });
    run("sub (broadcast)", true, n, [&](Rng& r) {
      auto [a, b] = broadcast_pair(r);
      return P{[](const auto& in) { return sub(in[0], in[1]); }, {a, b}};
    });
    run("mul (broadcast)", true, n, [&](Rng& r) {
      auto [a, b] = broadcast_pair(r);
      return P{[](const auto& in) { return mul(in[0], in[1]); }, {a, b}};
    });
    run("mul (fan-out x*x)", true, n, [&](Rng& r) {
      return P{[](const auto& in) { return mul(in[0], in[0]); }, {random_tensor<T>(r, small_shape(r, 2))}};
    });
    run("scale", true, n, [&](Rng& r) {
      const T f = static_cast<T>(std::uniform_real_distribution<double>(-2, 2)(r));
      return P{[f](const auto& in) { return scale(in[0], f); }, {random_tensor<T>(r, small_shape(r, 2))}};
    });
    for (auto [act, nm] : {std::pair{Activation::gelu, "gelu"}, std::pair{Activation::silu, "silu"},
                           std::pair{Activation::sigmoid, "sigmoid"}, std::pair{Activation::relu, "relu"}}) {
      const Activation a = act;
      run(std::string("activation ") + nm, false, n, [&, a](Rng& r) {
        auto x = random_tensor<T>(r, small_shape(r, 2), -3, 3);
        // keep relu inputs off the kink
        for (auto& v : x.data())
          if (std::abs(static_cast<double>(v)) < 0.1) v = static_cast<T>(0.5);
        return P{[a](const auto& in) { return activation(in[0], a); }, {x}};
      });
    }
    run("sum", true, n, [&](Rng& r) {
      return P{[](const auto& in) { return sum(in[0]); }, {random_tensor<T>(r, small_shape(r, 3))}};
    });
    run("mean", true, n, [&](Rng& r) {
      const std::size_t ax = pick(r, 0, 2);
      const bool keep = pick(r, 0, 1);
      return P{[=](const auto& in) { return mean(in[0], ax, keep); }, {random_tensor<T>(r, small_shape(r, 3))}};
    });
    run("softmax", false, n, [&](Rng& r) {
      const std::size_t ax = pick(r, 0, 2);
      return P{[ax](const auto& in) { return softmax(in[0], ax); }, {random_tensor<T>(r, small_shape(r, 3), -3, 3)}};
    });
    run("conv2d", true, n, [&](Rng& r) {
      const std::size_t G = pick(r, 1, 2), C = G * pick(r, 1, 2), O = G * pick(r, 1, 3), k = pick(r, 0, 1) ? 3 : 1;
      Conv2dOptions o{pick(r, 1, 2), k == 3 ? pick(r, 0, 1) : 0, G};
      const std::size_t H = pick(r, 3, 7), W = pick(r, 3, 7);
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 2), C, H, W}),
                                random_tensor<T>(r, Shape{O, C / G, k, k}), random_tensor<T>(r, Shape{O})};
      return P{[o](const auto& x) { return conv2d(x[0], x[1], std::optional<Tensor<T>>(x[2]), o); }, in};
    });
    run("conv2d depthwise 3x3", true, n, [&](Rng& r) {
      const std::size_t C = pick(r, 1, 4);
      Conv2dOptions o{1, 1, C};
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 2), C, pick(r, 1, 6), pick(r, 1, 6)}),
                                random_tensor<T>(r, Shape{C, 1, 3, 3})};
      return P{[o](const auto& x) { return conv2d(x[0], x[1], std::optional<Tensor<T>>(), o); }, in};
    });
    run("linear", true, n, [&](Rng& r) {
      const std::size_t din = pick(r, 1, 8), dout = pick(r, 1, 8);
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 4), pick(r, 1, 3), din}),
                                random_tensor<T>(r, Shape{dout, din}), random_tensor<T>(r, Shape{dout})};
      return P{[](const auto& x) { return linear(x[0], x[1], std::optional<Tensor<T>>(x[2])); }, in};
    });
    run("batch_norm (training)", false, n, [&](Rng& r) {
      const std::size_t C = pick(r, 1, 3);
      auto rm = std::make_shared<Tensor<T>>(Shape{C}, T(0));
      auto rv = std::make_shared<Tensor<T>>(Shape{C}, T(1));
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 3), C, pick(r, 2, 4), pick(r, 2, 4)}),
                                random_tensor<T>(r, Shape{C}, 0.5, 1.5), random_tensor<T>(r, Shape{C})};
      return P{[rm, rv](const auto& x) { return batch_norm(x[0], x[1], x[2], *rm, *rv, true); }, in};
    });
    run("batch_norm (inference)", true, n, [&](Rng& r) {
      const std::size_t C = pick(r, 1, 3);
      auto rm = std::make_shared<Tensor<T>>(random_tensor<T>(r, Shape{C}));
      auto rv = std::make_shared<Tensor<T>>(random_tensor<T>(r, Shape{C}, 0.5, 2));
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 3), C, pick(r, 1, 4), pick(r, 1, 4)}),
                                random_tensor<T>(r, Shape{C}, 0.5, 1.5), random_tensor<T>(r, Shape{C})};
      return P{[rm, rv](const auto& x) { return batch_norm(x[0], x[1], x[2], *rm, *rv, false); }, in};
    });
    run("layer_norm", false, n, [&](Rng& r) {
      const std::size_t D = pick(r, 2, 8);
      std::vector<Tensor<T>> in{random_tensor<T>(r, Shape{pick(r, 1, 4), D}), random_tensor<T>(r, Shape{D}, 0.5, 1.5),
                                random_tensor<T>(r, Shape{D})};
      return P{[](const auto& x) { return layer_norm(x[0], x[1], x[2]); }, in};
    });
    run("upsample_bilinear2x", true, n, [&](Rng& r) {
      return P{[](const auto& x) { return upsample_bilinear2x(x[0]); },
               {random_tensor<T>(r, Shape{pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 5), pick(r, 1, 5)})}};
    });
    run("cross_entropy", false, n, [&](Rng& r) {
      const std::size_t N = pick(r, 1, 2), K = pick(r, 2, 4), H = pick(r, 1, 3), W = pick(r, 1, 3);
      auto target = std::make_shared<std::vector<int>>(N * H * W);
      for (auto& t : *target) t = static_cast<int>(pick(r, 0, K - 1));
      return P{[target](const auto& x) { return cross_entropy(x[0], std::span<const int>(*target)); },
               {random_tensor<T>(r, Shape{N, K, H, W}, -2, 2)}};
    });
  }

  // Composite units own a registry; their parameters are checked alongside the input.
  template <typename Build>
  void unit(const std::string& name, bool affine, Build build) {
    run(name, affine, opt.block_seeds, [&](Rng& r) {
      auto reg = std::make_shared<nn::Registry<T>>(r());
      auto [fn, x] = build(*reg, r);
      // Nudge parameters off their symmetric init so every path carries signal.
      std::uniform_real_distribution<double> u(-0.3, 0.3);
      for (const auto& nt : reg->tensors())
        if (nt.kind == nn::TensorKind::parameter) {
          auto t = nt.tensor;
          for (auto& v : t.data()) v = static_cast<T>(static_cast<double>(v) + u(r));
        }
      std::vector<Tensor<T>> inputs{x};
      for (auto& p : reg->parameters()) inputs.push_back(p);
      Fn keep = [reg, fn = std::move(fn)](const std::vector<Tensor<T>>& in) { return fn(in); };
      return std::pair{keep, inputs};
    });
  }

  void blocks() {
    using nn::BranchKind;
    using Pair = std::pair<Fn, Tensor<T>>;
    unit("mbconv (1,4,6,6)", false, [&](nn::Registry<T>& reg, Rng& r) {
      auto m = std::make_shared<nn::MBConv<T>>(reg, "mb", 4);
      return Pair{[m](const auto& in) { return m->forward(in[0], true); }, random_tensor<T>(r, Shape{1, 4, 6, 6})};
    });
    unit("local branch (P=2, 8x8)", false, [&](nn::Registry<T>& reg, Rng& r) {
      auto b = std::make_shared<nn::WindowBranch<T>>(reg, "local", BranchKind::local, 2);
      return Pair{[b](const auto& in) { return b->forward(in[0]); }, random_tensor<T>(r, Shape{2, 3, 8, 8})};
    });
    unit("global branch (P=2, 8x8)", false, [&](nn::Registry<T>& reg, Rng& r) {
      auto b = std::make_shared<nn::WindowBranch<T>>(reg, "global", BranchKind::global, 2);
      return Pair{[b](const auto& in) { return b->forward(in[0]); }, random_tensor<T>(r, Shape{2, 3, 8, 8})};
    });
    unit("global branch with padding (P=2, 6x6)", false, [&](nn::Registry<T>& reg, Rng& r) {
      layout::PartitionOptions po{true, layout::ParityRule::cross_axis};
      auto b = std::make_shared<nn::WindowBranch<T>>(reg, "global", BranchKind::global, 2, po);
      return Pair{[b](const auto& in) { return b->forward(in[0]); }, random_tensor<T>(r, Shape{1, 2, 6, 6})};
    });
    unit("irsc_fuse", true, [&](nn::Registry<T>& reg, Rng& r) {
      auto up = reg.parameter("decoder_up", Shape{1, 4, 4, 3}, nn::Init::zeros());
      return Pair{[up](const auto& in) { return nn::irsc_fuse(in[0], up); }, random_tensor<T>(r, Shape{1, 2, 2, 16})};
    });
    for (auto mode : {nn::InteractionMode::without, nn::InteractionMode::local, nn::InteractionMode::global,
                      nn::InteractionMode::series, nn::InteractionMode::parallel}) {
      unit("segnetr block " + std::string(nn::to_string(mode)) + " (2,4,8,8) P=2", false,
           [&, mode](nn::Registry<T>& reg, Rng& r) {
             auto b = std::make_shared<nn::SegnetrBlock<T>>(reg, "block", 4, 2, mode);
             return Pair{[b](const auto& in) { return b->forward(in[0], true); },
                         random_tensor<T>(r, Shape{2, 4, 8, 8})};
           });
    }
  }
};

template <typename T>
std::vector<CheckResult> run_suite(const GradcheckOptions& opt) {
  GradSuite<T> s(opt);
  s.ops();
  s.blocks();
  return std::move(s.results);
}

}  // namespace

std::vector<CheckResult> gradcheck_suite(const GradcheckOptions& opt) {
  return opt.f64 ? run_suite<double>(opt) : run_suite<float>(opt);
}

}  // namespace segnetr::checks
