#include "segnetr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "segnetr/ops.hpp"
#include "segnetr/optim.hpp"

namespace segnetr::harness {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) { return splitmix(seed ^ splitmix(stream)); }

constexpr std::uint64_t kTrainStream = 0x7472'6169'6eULL;
constexpr std::uint64_t kEvalStream = 0x6576'616cULL;
constexpr std::uint64_t kOrderStream = 0x6f72'6465'72ULL;

}  // namespace

// -------------------- synthetic data --------------------

SyntheticSample make_sample(std::size_t size, std::size_t num_classes, std::uint64_t sample_seed,
                            SyntheticOptions opt) {
  if (size == 0 || num_classes < 2 || opt.channels == 0)
    throw ConfigError("synthetic data needs size > 0, num_classes >= 2, channels > 0");
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t C = opt.channels, S = size;
  SyntheticSample s;
  s.seed = sample_seed;
  s.mask.assign(S * S, 0);
  s.image.resize(C * S * S);

  std::vector<double> bg(C);
  for (auto& v : bg) v = 0.45 * u(rng);
  std::vector<std::vector<double>> colour(num_classes, std::vector<double>(C));

  const int shapes = 1 + static_cast<int>(u(rng) * 3) % 3;
  for (int i = 0; i < shapes; ++i) {
    const int cls = 1 + static_cast<int>(u(rng) * static_cast<double>(num_classes - 1)) % static_cast<int>(num_classes - 1);
    const bool ellipse = u(rng) < 0.5;
    const double cy = (0.15 + 0.7 * u(rng)) * S, cx = (0.15 + 0.7 * u(rng)) * S;
    const double ry = (0.08 + 0.17 * u(rng)) * S, rx = (0.08 + 0.17 * u(rng)) * S;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry, dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) s.mask[y * S + x] = cls;
      }
  }
  for (std::size_t k = 1; k < num_classes; ++k)
    for (std::size_t c = 0; c < C; ++c)
      colour[k][c] = c == (k - 1) % C ? 0.9 + 0.1 * u(rng) : 0.5 + 0.2 * u(rng);

  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < S * S; ++p) {
      const int k = s.mask[p];
      const double base = k == 0 ? bg[c] : colour[k][c];
      const double v = base + (opt.noise_sigma > 0 ? noise(rng) : 0.0);
      s.image[c * S * S + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return s;
}

Dataset gen_synthetic(std::size_t n, std::size_t size, std::size_t num_classes, std::uint64_t seed,
                      SyntheticOptions opt) {
  Dataset d{size, opt.channels, num_classes, {}};
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(make_sample(size, num_classes, derive(seed, i), opt));
  return d;
}

void make_batch(const Dataset& data, const std::vector<std::size_t>& indices, Tensor<float>& images,
                std::vector<int>& targets) {
  const std::size_t S = data.size, C = data.channels, per = C * S * S;
  images = Tensor<float>(Shape{indices.size(), C, S, S});
  targets.resize(indices.size() * S * S);
  auto dst = images.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = data.samples.at(indices[b]);
    std::copy(s.image.begin(), s.image.end(), dst.begin() + static_cast<std::ptrdiff_t>(b * per));
    std::copy(s.mask.begin(), s.mask.end(), targets.begin() + static_cast<std::ptrdiff_t>(b * S * S));
  }
}

// -------------------- checkpoints --------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw CheckpointTruncatedError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint32_t u(std::size_t bytes, const char* what) {
    need(bytes, what);
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const nn::Registry<float>& reg) {
  std::vector<std::uint8_t> out{'S', 'G', 'N', 'R'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(reg.tensors().size()));
  for (const auto& nt : reg.tensors()) {
    const auto& t = nt.tensor;
    out.push_back(static_cast<std::uint8_t>(nt.name.size()));
    out.push_back(static_cast<std::uint8_t>(nt.name.size() >> 8));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

void deserialize_checkpoint(nn::Registry<float>& reg, const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SGNR", 4) != 0)
    throw CheckpointMagicError("not a checkpoint: magic bytes are not SGNR");
  r.str(4, "magic");
  const auto version = r.u(4, "version");
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  const auto count = r.u(4, "tensor count");
  const auto& tensors = reg.tensors();
  if (count != tensors.size())
    throw CheckpointShapeError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                               std::to_string(tensors.size()));
  // Parse everything before writing so a failed load leaves the model intact.
  std::vector<std::vector<float>> staged(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto& nt = tensors[i];
    const auto len = r.u(2, "name length");
    const auto name = r.str(len, "name");
    if (name != nt.name)
      throw CheckpointShapeError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', model expects '" +
                                 nt.name + "'");
    const auto rank = r.u(1, "rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u(4, "extent"));
    if (shape != nt.tensor.shape())
      throw CheckpointShapeError("tensor '" + name + "' has shape " + segnetr::to_string(shape) + " in checkpoint, " +
                                 segnetr::to_string(nt.tensor.shape()) + " in model");
    auto& dst = staged[i];
    dst.resize(nt.tensor.numel());
    r.need(4 * dst.size(), "tensor data");
    for (auto& v : dst) {
      const auto bits = r.u(4, "tensor data");
      std::memcpy(&v, &bits, 4);
    }
  }
  if (!r.done()) throw CheckpointShapeError("checkpoint has trailing bytes after the last tensor");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto t = tensors[i].tensor;
    std::copy(staged[i].begin(), staged[i].end(), t.data().begin());
  }
}

void save_checkpoint(const model::Network<float>& net, const std::string& path) {
  const auto bytes = serialize_checkpoint(net.registry());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

void load_checkpoint(model::Network<float>& net, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  deserialize_checkpoint(net.registry(), bytes);
}

// -------------------- training --------------------

Dataset train_split(const model::ModelConfig& cfg, const TrainOptions& opt) {
  return gen_synthetic(opt.train_samples, cfg.resolution, cfg.num_classes, derive(cfg.seed, kTrainStream), opt.data);
}

Dataset eval_split(const model::ModelConfig& cfg, const TrainOptions& opt) {
  return gen_synthetic(opt.eval_samples, cfg.resolution, cfg.num_classes, derive(cfg.seed, kEvalStream), opt.data);
}

metrics::Scores evaluate(model::Network<float>& net, const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  metrics::ConfusionCounts total(data.num_classes);
  Tensor<float> images;
  std::vector<int> targets;
  for (std::size_t start = 0; start < data.samples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + batch_size, data.samples.size()); ++i) idx.push_back(i);
    make_batch(data, idx, images, targets);
    const auto pred = metrics::argmax_classes(net.forward(images, false));
    total += metrics::confusion(pred, targets, data.num_classes);
  }
  return metrics::iou_dice(total, 1);
}

std::string metrics_csv(const std::vector<LogRow>& log) {
  std::string out = "step,loss,mean_iou,mean_dice\n";
  char buf[128];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,", row.step, row.loss);
    out += buf;
    if (row.mean_iou) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", *row.mean_iou, *row.mean_dice);
      out += buf;
    } else {
      out += ",";
    }
    out += '\n';
  }
  return out;
}

TrainResult train(model::Network<float>& net, const TrainOptions& opt) {
  const auto& cfg = net.config();
  if (opt.batch_size == 0 || opt.train_samples == 0) throw ConfigError("train: batch_size and train_samples must be positive");
  const auto train_set = train_split(cfg, opt);
  const auto eval_set = eval_split(cfg, opt);

  Adam<float> adam(net.parameters(), AdamOptions{opt.lr});
  std::mt19937_64 order_rng(derive(cfg.seed, kOrderStream));
  std::vector<std::size_t> order(train_set.samples.size());
  std::size_t cursor = order.size();

  TrainResult res;
  Tensor<float> images;
  std::vector<int> targets;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < opt.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    make_batch(train_set, idx, images, targets);

    adam.zero_grad();
    auto loss = cross_entropy(net.forward(images, true), std::span<const int>(targets));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      clear_record<float>();
      throw NumericError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step));
    }
    backward(loss);
    adam.step();

    LogRow row{step, value, std::nullopt, std::nullopt};
    const bool last = step + 1 == opt.steps;
    if ((opt.eval_interval && (step + 1) % opt.eval_interval == 0) || last) {
      const auto s = evaluate(net, eval_set, opt.batch_size);
      row.mean_iou = s.mean_iou;
      row.mean_dice = s.mean_dice;
      res.final_iou = s.mean_iou;
      res.final_dice = s.mean_dice;
      if (opt.on_eval) opt.on_eval(row);
    }
    res.log.push_back(row);
    res.steps_run = step + 1;
    if (row.mean_dice && opt.stop_at_dice && *row.mean_dice >= *opt.stop_at_dice) break;
  }

  if (!res.log.empty()) {
    res.initial_loss = res.log.front().loss;
    const std::size_t tail = std::min<std::size_t>(20, res.log.size());
    double sum = 0;
    for (std::size_t i = res.log.size() - tail; i < res.log.size(); ++i) sum += res.log[i].loss;
    res.final_loss = sum / static_cast<double>(tail);
  }

  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const std::filesystem::path dir(opt.out_dir);
    std::ofstream((dir / "metrics.csv").string(), std::ios::binary | std::ios::trunc) << metrics_csv(res.log);
    std::ofstream((dir / "config.json").string(), std::ios::binary | std::ios::trunc) << model::config_to_json(cfg) << '\n';
    save_checkpoint(net, (dir / "model.ckpt").string());
  }
  return res;
}

}  // namespace segnetr::harness
