#include "segnetr/trace.hpp"

namespace segnetr::cost {

namespace {
thread_local Tracer* g_active = nullptr;
}

Tracer::Tracer(bool dry_run) : dry_run_(dry_run), previous_(g_active) { g_active = this; }

Tracer::~Tracer() { g_active = previous_; }

Tracer* Tracer::active() { return g_active; }

std::uint64_t Tracer::total_macs() const {
  std::uint64_t s = 0;
  for (const auto& r : rows_) s += r.macs;
  return s;
}

std::uint64_t Tracer::total_elementwise() const {
  std::uint64_t s = 0;
  for (const auto& r : rows_) s += r.elementwise;
  return s;
}

TraceRow& Tracer::current_row() {
  std::string name;
  for (std::size_t i = 0; i < path_.size(); ++i) {
    if (i) name += '.';
    name += path_[i];
  }
  if (name.empty()) name = "<root>";
  auto it = index_.find(name);
  if (it == index_.end()) {
    it = index_.emplace(name, rows_.size()).first;
    rows_.push_back({name, 0, 0});
  }
  return rows_[it->second];
}

void Tracer::add(std::uint64_t macs, std::uint64_t elementwise) {
  auto& row = current_row();
  row.macs += macs;
  row.elementwise += elementwise;
}

void Tracer::touch() { current_row(); }

void Tracer::push_scope(std::string_view name) { path_.emplace_back(name); }

void Tracer::pop_scope() {
  if (!path_.empty()) path_.pop_back();
}

Scope::Scope(std::string_view name) : active_(Tracer::active() != nullptr) {
  if (active_) Tracer::active()->push_scope(name);
}

Scope::~Scope() {
  if (active_ && Tracer::active()) Tracer::active()->pop_scope();
}

}  // namespace segnetr::cost
