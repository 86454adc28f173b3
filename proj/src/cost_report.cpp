#include "segnetr/cost_report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "segnetr/trace.hpp"

namespace segnetr::cost {

Convention parse_convention(std::string_view s) {
  if (s == "mac") return Convention::mac;
  if (s == "2flop") return Convention::two_flop;
  throw ConfigError("unknown convention '" + std::string(s) + "' (expected mac|2flop)");
}

std::string_view to_string(Convention c) { return c == Convention::mac ? "mac" : "2flop"; }

double CostReport::flops(Convention c) const {
  const double factor = c == Convention::two_flop ? 2.0 : 1.0;
  return factor * static_cast<double>(total_macs) + static_cast<double>(total_elementwise);
}

namespace {

std::string with_commas(std::uint64_t v) {
  auto s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

}  // namespace

std::string CostReport::to_text() const {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream os;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-*s %14s %16s %16s\n", static_cast<int>(width), "layer", "params", "macs",
                "elementwise");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %14s %16s %16s\n", static_cast<int>(width), r.name.c_str(),
                  with_commas(r.params).c_str(), with_commas(r.macs).c_str(), with_commas(r.elementwise).c_str());
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s %14s %16s %16s\n", static_cast<int>(width), "total",
                with_commas(total_params).c_str(), with_commas(total_macs).c_str(),
                with_commas(total_elementwise).c_str());
  os << buf;
  os << "input " << segnetr::to_string(input_shape) << "\n";
  std::snprintf(buf, sizeof buf, "params %.3f M\n", static_cast<double>(total_params) / 1e6);
  os << buf;
  std::snprintf(buf, sizeof buf, "GFLOPs (mac: 1 FLOP = 1 MAC)   %.3f\n", flops(Convention::mac) / 1e9);
  os << buf;
  std::snprintf(buf, sizeof buf, "GFLOPs (2flop: 1 MAC = 2 FLOPs) %.3f\n", flops(Convention::two_flop) / 1e9);
  os << buf;
  os << "selected convention " << to_string(convention) << "\n";
  return os.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "layer,params,macs\n";
  for (const auto& r : rows) os << r.name << ',' << r.params << ',' << r.ops() << '\n';
  return os.str();
}

template <typename T>
CostReport cost_report(model::Network<T>& net, const Shape& input_shape, Convention convention) {
  std::vector<TraceRow> traced;
  {
    NoGradGuard no_grad;
    Tracer tracer(true);
    net.forward_any(Tensor<T>(input_shape), false);
    traced = tracer.rows();
  }

  CostReport rep;
  rep.input_shape = input_shape;
  rep.convention = convention;
  std::map<std::string, std::size_t> index;
  for (const auto& t : traced) {
    index[t.name] = rep.rows.size();
    rep.rows.push_back({t.name, 0, t.macs, t.elementwise});
  }
  for (const auto& nt : net.registry().tensors()) {
    if (nt.kind != nn::TensorKind::parameter) continue;
    const auto dot = nt.name.rfind('.');
    const std::string owner = dot == std::string::npos ? nt.name : nt.name.substr(0, dot);
    auto it = index.find(owner);
    if (it == index.end()) {
      // Parameters used only inside child scopes (fusion weights): insert
      // before the first row under the owner.
      const std::string prefix = owner + ".";
      auto pos = std::find_if(rep.rows.begin(), rep.rows.end(),
                              [&](const CostRow& r) { return r.name.compare(0, prefix.size(), prefix) == 0; });
      rep.rows.insert(pos, CostRow{owner, 0, 0, 0});
      index.clear();
      for (std::size_t i = 0; i < rep.rows.size(); ++i) index[rep.rows[i].name] = i;
      it = index.find(owner);
    }
    rep.rows[it->second].params += nt.tensor.numel();
  }
  for (const auto& r : rep.rows) {
    rep.total_params += r.params;
    rep.total_macs += r.macs;
    rep.total_elementwise += r.elementwise;
  }
  return rep;
}

CostReport summarize(const model::ModelConfig& cfg, std::size_t height, std::size_t width, Convention convention) {
  auto net = model::build_model<float>(cfg);
  return cost_report(*net, Shape{1, 3, height, width}, convention);
}

CostReport summarize(const model::ModelConfig& cfg, Convention convention) {
  return summarize(cfg, cfg.resolution, cfg.resolution, convention);
}

std::uint64_t count_flops(const model::ModelConfig& cfg, const Shape& input_shape, Convention convention) {
  if (input_shape.size() != 4) throw ShapeError("count_flops: input shape must be [N,3,H,W]");
  auto net = model::build_model<float>(cfg);
  const auto rep = cost_report(*net, input_shape, convention);
  const std::uint64_t factor = convention == Convention::two_flop ? 2 : 1;
  return factor * rep.total_macs + rep.total_elementwise;
}

std::uint64_t attention_ops(const CostReport& report) {
  std::uint64_t total = 0;
  for (const auto& r : report.rows) {
    std::string_view name = r.name;
    bool inside = false;
    std::size_t start = 0;
    while (start <= name.size()) {
      auto end = name.find('.', start);
      if (end == std::string_view::npos) end = name.size();
      const auto seg = name.substr(start, end - start);
      if (seg == "local" || seg == "global") inside = true;
      start = end + 1;
    }
    if (inside) total += r.ops();
  }
  return total;
}

template CostReport cost_report<float>(model::Network<float>&, const Shape&, Convention);
template CostReport cost_report<double>(model::Network<double>&, const Shape&, Convention);

}  // namespace segnetr::cost
