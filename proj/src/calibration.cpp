#include "popcal/calibration.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "json.hpp"

namespace popcal {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Features

std::string_view feature_name(Feature f) {
  switch (f) {
    case Feature::PC: return "PC";
    case Feature::Verb: return "Verb";
    case Feature::Consis: return "Consis";
    case Feature::PopQ: return "Pop_Q";
    case Feature::PopGT: return "Pop_GT";
    case Feature::PopGe: return "Pop_Ge";
    case Feature::RPopGT: return "RPop_GT";
    case Feature::RPopGe: return "RPop_Ge";
    case Feature::SelfPopQ: return "Self:Pop_Q";
    case Feature::SelfPopGe: return "Self:Pop_Ge";
    case Feature::SelfRPopGe: return "Self:RPop_Ge";
  }
  return "?";
}

Feature parse_feature(std::string_view name) {
  for (auto f : {Feature::PC, Feature::Verb, Feature::Consis, Feature::PopQ, Feature::PopGT,
                 Feature::PopGe, Feature::RPopGT, Feature::RPopGe, Feature::SelfPopQ,
                 Feature::SelfPopGe, Feature::SelfRPopGe}) {
    if (feature_name(f) == name) return f;
  }
  throw ConfigError("unknown feature \"" + std::string(name) + "\"");
}

bool is_popularity_feature(Feature f) {
  return f != Feature::PC && f != Feature::Verb && f != Feature::Consis;
}

FeatureSet parse_feature_set(std::string_view name) {
  FeatureSet set;
  set.name = std::string(name);
  bool self = false;
  std::string_view body = name;
  if (body.starts_with("Self:")) {
    self = true;
    body.remove_prefix(5);
  }
  auto add_pop = [&](std::string_view pop) {
    std::string full = self ? "Self:" + std::string(pop) : std::string(pop);
    set.features.push_back(parse_feature(full));
  };
  std::size_t start = 0;
  while (start <= body.size()) {
    auto end = body.find('+', start);
    if (end == std::string_view::npos) end = body.size();
    auto part = body.substr(start, end - start);
    if (part == "ALL") {
      add_pop("Pop_Q");
      add_pop("Pop_Ge");
      add_pop("RPop_Ge");
    } else if (part == "PC" || part == "Verb" || part == "Consis") {
      set.features.push_back(parse_feature(part));
    } else if (!part.empty()) {
      add_pop(part);
    } else {
      throw ConfigError("malformed feature set \"" + std::string(name) + "\"");
    }
    start = end + 1;
  }
  return set;
}

std::optional<double> raw_feature(const AnalysisRecord& r, Feature f) {
  auto self = [&](std::optional<double> PopularityVector::*field) -> std::optional<double> {
    if (!r.self_pop) return std::nullopt;
    return (*r.self_pop).*field;
  };
  switch (f) {
    case Feature::PC: return r.qa.confidence;
    case Feature::Verb:
      return r.verb ? std::optional<double>(static_cast<double>(*r.verb)) : std::nullopt;
    case Feature::Consis: return r.consis;
    case Feature::PopQ: return r.pop.pop_q;
    case Feature::PopGT: return r.pop.pop_gt;
    case Feature::PopGe: return r.pop.pop_ge;
    case Feature::RPopGT: return r.pop.rpop_gt;
    case Feature::RPopGe: return r.pop.rpop_ge;
    case Feature::SelfPopQ: return self(&PopularityVector::pop_q);
    case Feature::SelfPopGe: return self(&PopularityVector::pop_ge);
    case Feature::SelfRPopGe: return self(&PopularityVector::rpop_ge);
  }
  return std::nullopt;
}

namespace {

double required_feature(const AnalysisRecord& r, Feature f) {
  auto v = raw_feature(r, f);
  if (!v) throw FeatureError("record lacks feature " + std::string(feature_name(f)));
  if (!std::isfinite(*v))
    throw FeatureError("feature " + std::string(feature_name(f)) + " is not finite");
  return *v;
}

double transform(Feature f, double v) {
  return is_popularity_feature(f) ? std::log1p(std::max(v, 0.0)) : v;
}

}  // namespace

NormalizationStats fit_normalization(std::span<const AnalysisRecord> train, const FeatureSet& set) {
  NormalizationStats stats;
  for (auto f : set.features) {
    if (!is_popularity_feature(f) || train.empty()) {
      stats.mean.push_back(0.0);
      stats.stddev.push_back(1.0);
      continue;
    }
    double sum = 0.0;
    for (const auto& r : train) sum += transform(f, required_feature(r, f));
    const double mean = sum / static_cast<double>(train.size());
    double ss = 0.0;
    for (const auto& r : train) {
      const double d = transform(f, required_feature(r, f)) - mean;
      ss += d * d;
    }
    double sd = std::sqrt(ss / static_cast<double>(train.size()));
    if (!(sd > 0.0)) sd = 1.0;
    stats.mean.push_back(mean);
    stats.stddev.push_back(sd);
  }
  return stats;
}

std::vector<double> build_features(const AnalysisRecord& record, const FeatureSet& set,
                                   const NormalizationStats* stats) {
  if (stats && (stats->mean.size() != set.features.size() ||
                stats->stddev.size() != set.features.size()))
    throw FeatureError("normalization stats do not match feature set " + set.name);
  std::vector<double> x;
  x.reserve(set.features.size());
  for (std::size_t i = 0; i < set.features.size(); ++i) {
    const auto f = set.features[i];
    double v = transform(f, required_feature(record, f));
    if (stats && is_popularity_feature(f)) v = (v - stats->mean[i]) / stats->stddev[i];
    x.push_back(v);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Splits and balancing

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            std::uint64_t seed) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  return split_train_test(all, seed);
}

std::vector<std::size_t> balance_indices(std::span<const int> labels, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw BalanceError("balance_classes: a class is absent");
  Rng rng(seed);
  auto& major = pos.size() > neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  // Partial Fisher-Yates draws `keep` majority indices without replacement.
  for (std::size_t i = 0; i < keep; ++i) {
    std::size_t j = i + uniform_index(rng, major.size() - i);
    std::swap(major[i], major[j]);
  }
  major.resize(keep);
  std::vector<std::size_t> out = pos;
  out.insert(out.end(), neg.begin(), neg.end());
  shuffle_in_place(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Threshold classifier

ThresholdModel fit_threshold(std::span<const double> xs, std::span<const int> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("fit_threshold: length mismatch");
  if (xs.empty()) throw std::invalid_argument("fit_threshold: no samples");
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });

  // lambda = -inf: everything predicted positive.
  long correct = 0;
  for (int y : ys) correct += y;
  ThresholdModel best{-std::numeric_limits<double>::infinity(), 0.0};
  long best_correct = correct;

  std::size_t i = 0;
  while (i < n) {
    const double v = xs[order[i]];
    std::size_t j = i;
    // Moving lambda past v flips this group to "predicted 0".
    while (j < n && xs[order[j]] == v) {
      correct += ys[order[j]] ? -1 : 1;
      ++j;
    }
    double lambda;
    if (j < n) {
      const double next = xs[order[j]];
      lambda = v + (next - v) / 2;
      if (!(lambda >= v && lambda < next)) lambda = v;
    } else {
      lambda = std::numeric_limits<double>::infinity();
    }
    if (correct > best_correct) {
      best_correct = correct;
      best.lambda = lambda;
    }
    i = j;
  }
  best.train_accuracy = static_cast<double>(best_correct) / static_cast<double>(n);
  return best;
}

// ---------------------------------------------------------------------------
// MLP

namespace {

DenseLayer make_layer(std::size_t in, std::size_t out) {
  DenseLayer l;
  l.in = in;
  l.out = out;
  l.weight.assign(in * out, 0.0);
  l.bias.assign(out, 0.0);
  return l;
}

void affine(const DenseLayer& l, std::span<const double> x, std::vector<double>& z) {
  z.assign(l.bias.begin(), l.bias.end());
  for (std::size_t o = 0; o < l.out; ++o) {
    const double* w = &l.weight[o * l.in];
    double acc = 0.0;
    for (std::size_t i = 0; i < l.in; ++i) acc += w[i] * x[i];
    z[o] += acc;
  }
}

struct Activations {
  std::vector<double> z1, a1, z2, a2, z3;
  std::array<double, 2> prob{};
};

void forward(const MlpModel& m, std::span<const double> x, const DropoutMasks* masks,
             Activations& act) {
  if (x.size() != m.input_dim())
    throw ShapeError("mlp: input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(m.input_dim()));
  affine(m.layers[0], x, act.z1);
  act.a1.resize(act.z1.size());
  for (std::size_t k = 0; k < act.z1.size(); ++k) {
    act.a1[k] = act.z1[k] > 0.0 ? act.z1[k] : 0.0;
    if (masks) act.a1[k] *= masks->hidden1[k];
  }
  affine(m.layers[1], act.a1, act.z2);
  act.a2.resize(act.z2.size());
  for (std::size_t k = 0; k < act.z2.size(); ++k) {
    act.a2[k] = act.z2[k] > 0.0 ? act.z2[k] : 0.0;
    if (masks) act.a2[k] *= masks->hidden2[k];
  }
  affine(m.layers[2], act.a2, act.z3);
  const double mx = std::max(act.z3[0], act.z3[1]);
  const double e0 = std::exp(act.z3[0] - mx);
  const double e1 = std::exp(act.z3[1] - mx);
  act.prob = {e0 / (e0 + e1), e1 / (e0 + e1)};
}

void fill_uniform(std::vector<double>& v, double bound, Rng& rng) {
  for (auto& x : v) x = (2.0 * uniform01(rng) - 1.0) * bound;
}

// Adam moment buffers mirror the layer layout.
struct AdamState {
  MlpGradient m;
  MlpGradient v;
  std::uint64_t step = 0;
};

void zero_like(MlpGradient& g, const MlpModel& model) {
  for (std::size_t l = 0; l < 3; ++l) g[l] = make_layer(model.layers[l].in, model.layers[l].out);
}

void adam_update(MlpModel& model, const MlpGradient& grad, AdamState& st, const TrainConfig& cfg) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  };
  for (std::size_t l = 0; l < 3; ++l) {
    update(model.layers[l].weight, grad[l].weight, st.m[l].weight, st.v[l].weight);
    update(model.layers[l].bias, grad[l].bias, st.m[l].bias, st.v[l].bias);
  }
}

double accuracy_of(const MlpModel& model, std::span<const CalibrationSample> data) {
  std::size_t hits = 0;
  for (const auto& s : data) hits += mlp_predict(model, s.features) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

MlpModel MlpModel::zeros(std::size_t input_dim) {
  MlpModel m;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < 3; ++l) {
    m.layers[l] = make_layer(in, kWidths[l]);
    in = kWidths[l];
  }
  return m;
}

MlpModel MlpModel::initialize(std::size_t input_dim, Rng& rng) {
  if (input_dim == 0) throw ShapeError("mlp: input dimension must be positive");
  MlpModel m = zeros(input_dim);
  for (auto& l : m.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    fill_uniform(l.weight, bound, rng);
    fill_uniform(l.bias, bound, rng);
  }
  return m;
}

std::size_t MlpModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

DropoutMasks sample_dropout(const MlpModel& model, Rng& rng) {
  DropoutMasks masks;
  const double keep = 1.0 - model.dropout;
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform01(rng) < keep ? 1.0 / keep : 0.0;
    return v;
  };
  masks.hidden1 = draw(model.layers[0].out);
  masks.hidden2 = draw(model.layers[1].out);
  return masks;
}

std::array<double, 2> mlp_probabilities(const MlpModel& model, std::span<const double> x,
                                        const DropoutMasks* masks) {
  Activations act;
  forward(model, x, masks, act);
  return act.prob;
}

double mlp_forward(const MlpModel& model, std::span<const double> x, bool training,
                   std::uint64_t seed) {
  if (!training) return mlp_probabilities(model, x)[1];
  Rng rng(seed);
  auto masks = sample_dropout(model, rng);
  return mlp_probabilities(model, x, &masks)[1];
}

double mlp_loss(const MlpModel& model, std::span<const CalibrationSample> batch, MlpGradient* grad,
                std::span<const DropoutMasks> masks) {
  if (batch.empty()) throw std::invalid_argument("mlp_loss: empty batch");
  if (!masks.empty() && masks.size() != batch.size())
    throw std::invalid_argument("mlp_loss: one dropout mask per sample required");
  if (grad) zero_like(*grad, model);
  const double scale = 1.0 / static_cast<double>(batch.size());
  Activations act;
  std::vector<double> g3(2), g2, g1;
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    const DropoutMasks* mk = masks.empty() ? nullptr : &masks[b];
    forward(model, s.features, mk, act);
    const double mx = std::max(act.z3[0], act.z3[1]);
    const double lse = mx + std::log(std::exp(act.z3[0] - mx) + std::exp(act.z3[1] - mx));
    loss += lse - act.z3[static_cast<std::size_t>(s.label)];
    if (!grad) continue;

    auto& G = *grad;
    const auto& L = model.layers;
    g3[0] = (act.prob[0] - (s.label == 0 ? 1.0 : 0.0)) * scale;
    g3[1] = (act.prob[1] - (s.label == 1 ? 1.0 : 0.0)) * scale;
    for (std::size_t o = 0; o < 2; ++o) {
      G[2].bias[o] += g3[o];
      for (std::size_t i = 0; i < L[2].in; ++i) G[2].weight[o * L[2].in + i] += g3[o] * act.a2[i];
    }
    g2.assign(L[1].out, 0.0);
    for (std::size_t i = 0; i < L[2].in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < 2; ++o) acc += L[2].weight[o * L[2].in + i] * g3[o];
      if (mk) acc *= mk->hidden2[i];
      g2[i] = act.z2[i] > 0.0 ? acc : 0.0;
    }
    for (std::size_t o = 0; o < L[1].out; ++o) {
      G[1].bias[o] += g2[o];
      for (std::size_t i = 0; i < L[1].in; ++i) G[1].weight[o * L[1].in + i] += g2[o] * act.a1[i];
    }
    g1.assign(L[0].out, 0.0);
    for (std::size_t i = 0; i < L[1].in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < L[1].out; ++o) acc += L[1].weight[o * L[1].in + i] * g2[o];
      if (mk) acc *= mk->hidden1[i];
      g1[i] = act.z1[i] > 0.0 ? acc : 0.0;
    }
    for (std::size_t o = 0; o < L[0].out; ++o) {
      G[0].bias[o] += g1[o];
      for (std::size_t i = 0; i < L[0].in; ++i)
        G[0].weight[o * L[0].in + i] += g1[o] * s.features[i];
    }
  }
  return loss * scale;
}

TrainResult train_mlp(std::span<const CalibrationSample> train, const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("train_mlp: empty training set");
  if (cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0))
    throw std::invalid_argument("train_mlp: non-positive training configuration");
  const std::size_t dim = train.front().features.size();
  for (const auto& s : train) {
    if (s.features.size() != dim) throw ShapeError("train_mlp: inconsistent feature dimension");
    for (double v : s.features)
      if (!std::isfinite(v)) throw std::invalid_argument("train_mlp: non-finite feature");
    if (s.label != 0 && s.label != 1) throw std::invalid_argument("train_mlp: label must be 0/1");
  }

  Rng rng(cfg.seed);
  MlpModel model = MlpModel::initialize(dim, rng);
  model.dropout = cfg.dropout;
  AdamState adam;
  zero_like(adam.m, model);
  zero_like(adam.v, model);

  TrainResult result;
  result.model = model;
  result.train_accuracy = -1.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<CalibrationSample> batch;
  std::vector<DropoutMasks> masks;
  MlpGradient grad;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      masks.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(train[order[k]]);
        if (cfg.dropout > 0.0) masks.push_back(sample_dropout(model, rng));
      }
      const double loss = mlp_loss(model, batch, &grad, masks);
      if (!std::isfinite(loss))
        throw DivergenceError(epoch, "train_mlp: non-finite loss at epoch " + std::to_string(epoch));
      adam_update(model, grad, adam, cfg);
    }
    const double acc = accuracy_of(model, train);
    result.epoch_accuracy.push_back(acc);
    if (acc > result.train_accuracy) {
      result.train_accuracy = acc;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

double evaluate_predictor(const Predictor& predictor, std::span<const CalibrationSample> test) {
  if (test.empty()) throw std::invalid_argument("evaluate_predictor: empty test set");
  std::size_t hits = 0;
  for (const auto& s : test) hits += predictor(s) == s.label ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'P', 'C', 'M', 'L', 'P', '0', '0', '1'};

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(std::string_view bytes, std::size_t& pos) {
  if (bytes.size() - pos < 8) throw Error("checkpoint: truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += 8;
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MlpCheckpoint& ckpt) {
  std::string bytes(kCkptMagic, 8);
  put_f64(bytes, static_cast<double>(ckpt.model.input_dim()));
  put_f64(bytes, ckpt.model.dropout);
  for (const auto& l : ckpt.model.layers) {
    for (double w : l.weight) put_f64(bytes, w);
    for (double b : l.bias) put_f64(bytes, b);
  }
  write_file_atomic(path, bytes);

  json manifest;
  manifest["format_version"] = 1;
  std::vector<std::size_t> sizes = {ckpt.model.input_dim()};
  for (auto w : MlpModel::kWidths) sizes.push_back(w);
  manifest["layer_sizes"] = sizes;
  manifest["seed"] = ckpt.seed;
  manifest["train_accuracy"] = ckpt.train_accuracy;
  manifest["features"] = ckpt.feature_names;
  manifest["normalization"] = {{"mean", ckpt.stats.mean}, {"stddev", ckpt.stats.stddev}};
  manifest["checksum"] = sha256_hex(bytes);
  auto sidecar = path;
  sidecar += ".json";
  write_file_atomic(sidecar, manifest.dump(2) + "\n");
}

MlpCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  auto sidecar = path;
  sidecar += ".json";
  auto manifest = json::parse(read_file(sidecar));
  if (manifest.at("checksum").get<std::string>() != sha256_hex(bytes))
    throw Error("checkpoint: checksum mismatch for " + path.string());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
    throw Error("checkpoint: bad magic");
  std::size_t pos = 8;
  const auto dim = static_cast<std::size_t>(get_f64(bytes, pos));
  MlpCheckpoint ckpt;
  ckpt.model = MlpModel::zeros(dim);
  ckpt.model.dropout = get_f64(bytes, pos);
  for (auto& l : ckpt.model.layers) {
    for (double& w : l.weight) w = get_f64(bytes, pos);
    for (double& b : l.bias) b = get_f64(bytes, pos);
  }
  if (pos != bytes.size()) throw Error("checkpoint: trailing bytes");
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.train_accuracy = manifest.at("train_accuracy").get<double>();
  ckpt.feature_names = manifest.at("features").get<std::vector<std::string>>();
  ckpt.stats.mean = manifest.at("normalization").at("mean").get<std::vector<double>>();
  ckpt.stats.stddev = manifest.at("normalization").at("stddev").get<std::vector<double>>();
  return ckpt;
}

// ---------------------------------------------------------------------------
// Protocol

ProtocolRow make_protocol_row(std::string_view name) {
  ProtocolRow row;
  row.name = std::string(name);
  row.features = parse_feature_set(name);
  if (row.features.features.size() > 1) {
    row.kind = RowKind::Mlp;
  } else if (row.features.features.front() == Feature::Verb) {
    row.kind = RowKind::Direct;
  } else {
    row.kind = RowKind::Threshold;
  }
  return row;
}

std::vector<ProtocolRow> default_protocol_rows(bool include_self) {
  std::vector<std::string> names = {"Verb",      "Consis",      "PC",          "Pop_Q",
                                    "Pop_Ge",    "RPop_Ge",     "PC+Pop_Q",    "PC+Pop_Ge",
                                    "PC+RPop_Ge", "PC+ALL"};
  if (include_self) {
    for (const char* n : {"Self:Pop_Q", "Self:Pop_Ge", "Self:RPop_Ge", "Self:PC+Pop_Q",
                          "Self:PC+Pop_Ge", "Self:PC+RPop_Ge", "Self:PC+ALL"})
      names.push_back(n);
  }
  std::vector<ProtocolRow> rows;
  for (const auto& n : names) rows.push_back(make_protocol_row(n));
  return rows;
}

const RowResult* ProtocolResult::row(std::string_view name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

namespace {

struct TaskOutput {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::optional<double> threshold;
};

TaskOutput run_task(const std::vector<const AnalysisRecord*>& used, const ProtocolRow& row,
                    const std::vector<std::size_t>& train_idx,
                    const std::vector<std::size_t>& test_idx, const TrainConfig& base,
                    std::uint64_t seed) {
  std::vector<AnalysisRecord> train_records;
  train_records.reserve(train_idx.size());
  for (auto i : train_idx) train_records.push_back(*used[i]);
  const auto stats = fit_normalization(train_records, row.features);

  auto samples_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<CalibrationSample> out;
    out.reserve(idx.size());
    for (auto i : idx)
      out.push_back({build_features(*used[i], row.features, &stats), used[i]->qa.correct});
    return out;
  };
  const auto train = samples_of(train_idx);
  const auto test = samples_of(test_idx);

  TaskOutput out;
  Predictor predictor;
  switch (row.kind) {
    case RowKind::Direct:
      predictor = [](const CalibrationSample& s) { return s.features[0] > 0.5 ? 1 : 0; };
      break;
    case RowKind::Threshold: {
      std::vector<double> xs;
      std::vector<int> ys;
      for (const auto& s : train) {
        xs.push_back(s.features[0]);
        ys.push_back(s.label);
      }
      const auto th = fit_threshold(xs, ys);
      out.threshold = th.lambda;
      predictor = [lambda = th.lambda](const CalibrationSample& s) {
        return predict_threshold(s.features[0], lambda);
      };
      break;
    }
    case RowKind::Mlp: {
      TrainConfig cfg = base;
      cfg.seed = seed;
      auto trained = train_mlp(train, cfg);
      predictor = [model = std::move(trained.model)](const CalibrationSample& s) {
        return mlp_predict(model, s.features);
      };
      break;
    }
  }
  for (const auto& s : test) out.predictions.push_back(predictor(s));
  out.accuracy = evaluate_predictor(predictor, test);
  return out;
}

}  // namespace

ProtocolResult run_protocol(const std::vector<AnalysisRecord>& records, const ProtocolConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("run_protocol: no seeds");
  if (records.size() < 2) throw std::invalid_argument("run_protocol: need at least two records");

  ProtocolResult result;
  if (cfg.balance) {
    std::vector<int> labels;
    for (const auto& r : records) labels.push_back(r.qa.correct);
    result.used_indices = balance_indices(labels, cfg.balance_seed);
  } else {
    result.used_indices.resize(records.size());
    std::iota(result.used_indices.begin(), result.used_indices.end(), 0);
  }
  std::vector<const AnalysisRecord*> used;
  for (auto i : result.used_indices) used.push_back(&records[i]);

  const std::size_t n_rows = cfg.rows.size();
  const std::size_t n_seeds = cfg.seeds.size();
  result.rows.resize(n_rows);
  std::vector<bool> available(n_rows, true);
  for (std::size_t r = 0; r < n_rows; ++r) {
    result.rows[r].name = cfg.rows[r].name;
    for (auto f : cfg.rows[r].features.features) {
      for (const auto* rec : used) {
        auto v = raw_feature(*rec, f);
        if (!v || !std::isfinite(*v)) {
          available[r] = false;
          result.rows[r].available = false;
          result.rows[r].unavailable_reason =
              "missing signal " + std::string(feature_name(f));
          break;
        }
      }
      if (!available[r]) break;
    }
  }

  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> splits;
  for (auto seed : cfg.seeds) splits.push_back(split_indices(used.size(), seed));

  std::vector<TaskOutput> outputs(n_rows * n_seeds);
  std::vector<std::string> errors(n_rows * n_seeds);
  const auto n_tasks = static_cast<std::int64_t>(outputs.size());
#pragma omp parallel for num_threads(std::max(1, cfg.workers)) schedule(dynamic, 1)
  for (std::int64_t t = 0; t < n_tasks; ++t) {
    const std::size_t r = static_cast<std::size_t>(t) / n_seeds;
    const std::size_t s = static_cast<std::size_t>(t) % n_seeds;
    if (!available[r]) continue;
    try {
      outputs[t] = run_task(used, cfg.rows[r], splits[s].first, splits[s].second, cfg.train,
                            cfg.seeds[s]);
    } catch (const std::exception& ex) {
      errors[t] = ex.what();
    }
  }

  for (std::size_t s = 0; s < n_seeds; ++s) {
    SeedRun run;
    run.seed = cfg.seeds[s];
    run.test_indices = splits[s].second;
    result.runs.push_back(std::move(run));
  }
  for (std::size_t r = 0; r < n_rows; ++r) {
    auto& row = result.rows[r];
    if (!row.available) continue;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto t = r * n_seeds + s;
      if (!errors[t].empty()) {
        row.available = false;
        row.unavailable_reason = errors[t];
        row.seed_accuracy.clear();
        break;
      }
      row.seed_accuracy.push_back(outputs[t].accuracy);
      result.runs[s].predictions[row.name] = outputs[t].predictions;
      if (outputs[t].threshold) result.runs[s].thresholds[row.name] = *outputs[t].threshold;
    }
    if (!row.available) continue;
    row.mean_accuracy = std::accumulate(row.seed_accuracy.begin(), row.seed_accuracy.end(), 0.0) /
                        static_cast<double>(row.seed_accuracy.size());
  }
  return result;
}

std::string protocol_result_json(const ProtocolResult& result) {
  nlohmann::ordered_json j;
  j["used_indices"] = result.used_indices;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : result.rows) {
    nlohmann::ordered_json row;
    row["name"] = r.name;
    row["available"] = r.available;
    if (!r.available) row["unavailable_reason"] = r.unavailable_reason;
    row["seed_accuracy"] = r.seed_accuracy;
    row["mean_accuracy"] = r.mean_accuracy;
    rows.push_back(row);
  }
  j["rows"] = rows;
  auto runs = nlohmann::ordered_json::array();
  for (const auto& run : result.runs) {
    nlohmann::ordered_json o;
    o["seed"] = run.seed;
    o["test_indices"] = run.test_indices;
    o["predictions"] = run.predictions;
    auto th = nlohmann::ordered_json::object();
    for (const auto& [name, lambda] : run.thresholds) {
      // JSON has no infinities.
      if (std::isfinite(lambda)) {
        th[name] = lambda;
      } else {
        th[name] = lambda > 0 ? "inf" : "-inf";
      }
    }
    o["thresholds"] = th;
    runs.push_back(o);
  }
  j["runs"] = runs;
  return j.dump(1) + "\n";
}

ProtocolResult parse_protocol_result_json(std::string_view text) {
  const auto j = json::parse(text);
  ProtocolResult result;
  result.used_indices = j.at("used_indices").get<std::vector<std::size_t>>();
  for (const auto& row : j.at("rows")) {
    RowResult r;
    r.name = row.at("name").get<std::string>();
    r.available = row.at("available").get<bool>();
    r.unavailable_reason = row.value("unavailable_reason", "");
    r.seed_accuracy = row.at("seed_accuracy").get<std::vector<double>>();
    r.mean_accuracy = row.at("mean_accuracy").get<double>();
    result.rows.push_back(std::move(r));
  }
  for (const auto& o : j.at("runs")) {
    SeedRun run;
    run.seed = o.at("seed").get<std::uint64_t>();
    run.test_indices = o.at("test_indices").get<std::vector<std::size_t>>();
    run.predictions = o.at("predictions").get<std::map<std::string, std::vector<int>>>();
    for (const auto& [name, v] : o.at("thresholds").items()) {
      if (v.is_string()) {
        const double inf = std::numeric_limits<double>::infinity();
        run.thresholds[name] = v.get<std::string>() == "inf" ? inf : -inf;
      } else {
        run.thresholds[name] = v.get<double>();
      }
    }
    result.runs.push_back(std::move(run));
  }
  return result;
}

}  // namespace popcal
