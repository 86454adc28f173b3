#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "segnetr/model.hpp"

namespace segnetr::cost {

/// mac: 1 FLOP = 1 MAC. two_flop: 1 MAC = 2 FLOPs. Elementwise ops count
/// once under both.
enum class Convention { mac, two_flop };

Convention parse_convention(std::string_view s);  // "mac" | "2flop"
std::string_view to_string(Convention c);

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;

  std::uint64_t ops() const { return macs + elementwise; }
};

struct CostReport {
  std::vector<CostRow> rows;
  Shape input_shape;
  Convention convention = Convention::mac;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t total_elementwise = 0;

  double flops(Convention c) const;
  double flops() const { return flops(convention); }
  double gflops() const { return flops() / 1e9; }

  /// Aligned table with both conventions in the footer.
  std::string to_text() const;
  /// Columns layer,params,macs; macs is MACs plus elementwise ops.
  std::string to_csv() const;
};

/// Dry-run trace of one forward pass on `input_shape` plus parameter
/// ownership: a parameter belongs to the row named by its path minus the
/// final segment.
template <typename T>
CostReport cost_report(model::Network<T>& net, const Shape& input_shape, Convention convention = Convention::mac);

/// Builds the float model from `cfg` and reports it on [1,3,H,W].
CostReport summarize(const model::ModelConfig& cfg, std::size_t height, std::size_t width,
                     Convention convention = Convention::mac);
CostReport summarize(const model::ModelConfig& cfg, Convention convention = Convention::mac);

template <typename T>
std::uint64_t count_params(const model::Network<T>& net) {
  return net.parameter_count();
}

std::uint64_t count_flops(const model::ModelConfig& cfg, const Shape& input_shape, Convention convention);

/// MACs plus elementwise ops of every row inside a local or global window
/// branch.
std::uint64_t attention_ops(const CostReport& report);

}  // namespace segnetr::cost
