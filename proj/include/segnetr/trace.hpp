#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace segnetr::cost {

/// Per-layer operation tally. `macs` counts multiply-accumulates (conv,
/// linear); `elementwise` counts one op per element for norms, activations,
/// pooling, softmax and elementwise arithmetic. Layout ops add nothing.
struct TraceRow {
  std::string name;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
};

/// Installs itself as the active tracer for the current thread while alive.
/// In dry-run mode ops compute output shapes and costs but skip arithmetic.
class Tracer {
public:
  explicit Tracer(bool dry_run = true);
  ~Tracer();
  Tracer(const Tracer&) = delete;
  Tracer& operator=(const Tracer&) = delete;

  bool dry_run() const { return dry_run_; }
  const std::vector<TraceRow>& rows() const { return rows_; }
  std::uint64_t total_macs() const;
  std::uint64_t total_elementwise() const;

  void add(std::uint64_t macs, std::uint64_t elementwise);
  void touch();  // registers the current scope as a row even with zero cost
  void push_scope(std::string_view name);
  void pop_scope();

  static Tracer* active();

private:
  TraceRow& current_row();

  bool dry_run_;
  Tracer* previous_;
  std::vector<std::string> path_;
  std::vector<TraceRow> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// RAII name segment; no-op without an active tracer.
class Scope {
public:
  explicit Scope(std::string_view name);
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

private:
  bool active_;
};

inline bool dry_run() {
  auto* t = Tracer::active();
  return t && t->dry_run();
}

inline void add_macs(std::uint64_t n) {
  if (auto* t = Tracer::active()) t->add(n, 0);
}
inline void add_elementwise(std::uint64_t n) {
  if (auto* t = Tracer::active()) t->add(0, n);
}
inline void add_layout() {
  if (auto* t = Tracer::active()) t->touch();
}

}  // namespace segnetr::cost
