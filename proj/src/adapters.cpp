#include "metatuner/adapters.hpp"

#include <cmath>
#include <cstring>

#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"
#include "metatuner/tasks.hpp"

namespace metatuner {

void LoraConfig::validate() const {
  if (rank < 1) throw ValueError("LoraConfig: rank must be >= 1");
  if (!(lambda >= 0.0)) throw ValueError("LoraConfig: lambda must be >= 0");
  if (d_model < 1 || n_layers < 1) throw ValueError("LoraConfig: d_model and n_layers must be >= 1");
  if (rank > d_model) {
    throw ValueError("LoraConfig: rank " + std::to_string(rank) + " exceeds min(d_M, k_M) = " +
                     std::to_string(d_model));
  }
}

std::vector<NamedTensor> HyperNetworkWeights::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "hyper." + std::to_string(i) + ".";
    out.push_back({p + "down_b", layers[i].down_b});
    out.push_back({p + "up_b", layers[i].up_b});
    out.push_back({p + "down_a", layers[i].down_a});
    out.push_back({p + "up_a", layers[i].up_a});
  }
  return out;
}

std::vector<Tensord> HyperNetworkWeights::parameters() const {
  std::vector<Tensord> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

HyperNetworkWeights HyperNetworkWeights::clone() const {
  HyperNetworkWeights h = *this;
  for (auto& l : h.layers) {
    l.down_b = Tensord::parameter(l.down_b.value());
    l.up_b = Tensord::parameter(l.up_b.value());
    l.down_a = Tensord::parameter(l.down_a.value());
    l.up_a = Tensord::parameter(l.up_a.value());
  }
  return h;
}

bool HyperNetworkWeights::values_equal(const HyperNetworkWeights& other) const {
  const auto a = parameters(), b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].value() != b[i].value()) return false;
  }
  return true;
}

HyperNetworkWeights init_hypernetwork(const LoraConfig& cfg, int context_len, int hidden, std::uint64_t seed) {
  cfg.validate();
  if (context_len < 1 || hidden < 1) throw ValueError("init_hypernetwork: l and h_G must be >= 1");
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(context_len));
  auto normal = [&](int r, int c, double sd) {
    Matrixd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
    return Tensord::parameter(std::move(m));
  };
  HyperNetworkWeights h;
  h.context_len = context_len;
  h.hidden = hidden;
  h.lora = cfg;
  const int count = cfg.shared_hypernetwork ? 1 : cfg.n_layers;
  for (int i = 0; i < count; ++i) {
    HyperLayerWeights l;
    l.down_b = normal(cfg.d_model, context_len, stddev);
    l.up_b = Tensord::parameter(Matrixd::Zero(hidden, cfg.rank));
    l.down_a = normal(cfg.rank, context_len, stddev);
    l.up_a = normal(hidden, cfg.d_model, 1.0 / std::sqrt(static_cast<double>(hidden)));
    h.layers.push_back(std::move(l));
  }
  return h;
}

namespace {

void expect_shape(const Tensord& t, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (t.rows() != rows || t.cols() != cols) {
    throw ShapeError(std::string("hypernetwork: ") + what + " has shape " + t.shape_string() + ", expected (" +
                     std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
}

}  // namespace

LoraFactors generate_lora(const HyperNetworkWeights& hyper, const Tensord& h) {
  const int l = hyper.context_len, hg = hyper.hidden, r = hyper.lora.rank, d = hyper.lora.d_model;
  expect_shape(h, l, hg, "hidden states h");
  LoraFactors f;
  for (int layer = 0; layer < hyper.lora.n_layers; ++layer) {
    const auto& w = hyper.for_layer(static_cast<std::size_t>(layer));
    expect_shape(w.down_b, d, l, "W_d_b");
    expect_shape(w.up_b, hg, r, "W_u_b");
    expect_shape(w.down_a, r, l, "W_d_a");
    expect_shape(w.up_a, hg, d, "W_u_a");
    f.layers.push_back({matmul(relu(matmul(w.down_b, h)), w.up_b), matmul(relu(matmul(w.down_a, h)), w.up_a)});
  }
  return f;
}

std::vector<Tensord> apply_lora(const MicroLMWeights& base, const LoraFactors& factors, const LoraConfig& cfg) {
  if (factors.layers.size() != base.blocks.size()) {
    throw ShapeError("apply_lora: " + std::to_string(factors.layers.size()) + " factor layers for " +
                     std::to_string(base.blocks.size()) + " actor blocks");
  }
  std::vector<Tensord> out;
  for (std::size_t i = 0; i < base.blocks.size(); ++i) {
    if (factors.layers[i].theta_b.cols() != cfg.rank) {
      throw ShapeError("apply_lora: factor rank " + std::to_string(factors.layers[i].theta_b.cols()) +
                       " differs from configured rank " + std::to_string(cfg.rank));
    }
    out.push_back(effective_projection(base.blocks[i].wo, factors.layers[i], cfg.lambda));
  }
  return out;
}

std::uint64_t factors_hash(const LoraFactors& factors) {
  std::uint64_t h = fnv1a("");
  for (const auto& l : factors.layers) {
    for (const Tensord* t : {&l.theta_b, &l.theta_a}) {
      const auto& v = t->value();
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), sizeof(double) * static_cast<std::size_t>(v.size())), h);
    }
  }
  return h;
}

std::vector<double> factor_update_norms(const LoraFactors& factors) {
  std::vector<double> out;
  for (const auto& l : factors.layers) out.push_back((l.theta_b.value() * l.theta_a.value()).norm());
  return out;
}

}  // namespace metatuner
