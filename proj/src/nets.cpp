#include "mlpinn/nets.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace mlpinn {

int network_input_dim(const NetworkSpec& spec) {
  return std::visit([](const auto& s) { return s.input_dim; }, spec);
}

void validate_spec(const NetworkSpec& spec) {
  if (const auto* m = std::get_if<MlpSpec>(&spec)) {
    if (m->input_dim < 1) throw std::invalid_argument("mlp: input_dim must be >= 1");
    if (m->hidden.empty()) throw std::invalid_argument("mlp: hidden widths must be non-empty");
    for (int w : m->hidden)
      if (w < 1) throw std::invalid_argument("mlp: hidden widths must be >= 1");
    if (m->output_dim != 1) throw std::invalid_argument("mlp: only scalar output supported");
    return;
  }
  const auto& f = std::get<FourierNetSpec>(spec);
  if (f.input_dim < 1) throw std::invalid_argument("fourier: input_dim must be >= 1");
  if (f.embeddings.empty()) throw std::invalid_argument("fourier: needs >= 1 embedding");
  const int m0 = f.embeddings.front().num_features;
  for (const auto& e : f.embeddings) {
    if (e.num_features < 1) throw std::invalid_argument("fourier: num_features must be >= 1");
    if (e.sigma <= 0.0) throw std::invalid_argument("fourier: sigma must be positive");
    if (e.num_features != m0)
      throw std::invalid_argument("fourier: embeddings sharing one extractor need equal m");
    if (!e.scale.empty() && static_cast<int>(e.scale.size()) != e.num_features)
      throw std::invalid_argument("fourier: scale length must equal num_features");
  }
  if (f.extractor_hidden.empty())
    throw std::invalid_argument("fourier: extractor hidden widths must be non-empty");
  for (int w : f.extractor_hidden)
    if (w < 1) throw std::invalid_argument("fourier: extractor widths must be >= 1");
  if (f.dense_width < 1) throw std::invalid_argument("fourier: dense_width must be >= 1");
  if (f.output_dim != 1) throw std::invalid_argument("fourier: only scalar output supported");
}

size_t parameter_count(const NetworkSpec& spec) {
  auto dense = [](size_t in, size_t out) { return in * out + out; };
  if (const auto* m = std::get_if<MlpSpec>(&spec)) {
    size_t n = 0, in = m->input_dim;
    for (int w : m->hidden) {
      n += dense(in, w);
      in = w;
    }
    return n + dense(in, 1);
  }
  const auto& f = std::get<FourierNetSpec>(spec);
  size_t n = 0, in = 2 * static_cast<size_t>(f.embeddings.front().num_features);
  for (int w : f.extractor_hidden) {
    n += dense(in, w);
    in = w;
  }
  const size_t concat = in * f.embeddings.size();
  n += dense(concat, f.dense_width);
  n += dense(f.dense_width, 1);
  return n;
}

std::vector<double> embed(std::span<const double> x, const FourierEmbeddingSpec& emb) {
  const size_t m = emb.num_features;
  if (emb.wavenumbers.size() != m * x.size())
    throw std::invalid_argument("embed: input dimension does not match wavenumber matrix");
  std::vector<double> out(2 * m);
  for (size_t j = 0; j < m; ++j) {
    double r = 0.0;
    for (size_t k = 0; k < x.size(); ++k) r += emb.wavenumbers[j * x.size() + k] * x[k];
    const double a = emb.scale.empty() ? 1.0 : emb.scale[j];
    out[j] = a * std::cos(r);
    out[m + j] = a * std::sin(r);
  }
  return out;
}

namespace {

struct SliceRef {
  size_t w = 0, b = 0;  // offsets of the weight matrix / bias vector
  size_t in = 0, out = 0;
};

SliceRef find_layer(const ParameterStore& ps, const std::string& name, size_t in, size_t out) {
  SliceRef r{0, 0, in, out};
  for (const auto& s : ps.slices()) {
    if (s.name == name + ".weight") r.w = s.offset;
    if (s.name == name + ".bias") r.b = s.offset;
  }
  return r;
}

// Emits one dense layer (rows of AffineP); returns pre-activation nodes.
std::vector<NodeId> emit_affine_layer(GraphBuilder& g, std::span<const NodeId> in,
                                      const SliceRef& s) {
  std::vector<NodeId> z(s.out);
  for (size_t r = 0; r < s.out; ++r)
    z[r] = g.affine_params(in, static_cast<uint32_t>(s.w + r * s.in),
                           static_cast<int32_t>(s.b + r));
  return z;
}

std::vector<NodeId> emit_tanh(GraphBuilder& g, std::span<const NodeId> z) {
  std::vector<NodeId> h(z.size());
  for (size_t i = 0; i < z.size(); ++i) h[i] = g.tanh(z[i]);
  return h;
}

}  // namespace

NodeId Network::emit(GraphBuilder& g, std::span<const NodeId> x, uint32_t param_offset) const {
  if (static_cast<int>(x.size()) != input_dim())
    throw std::invalid_argument("network emit: wrong input arity");
  const size_t off = param_offset;
  if (const auto* m = std::get_if<MlpSpec>(&spec_)) {
    std::vector<NodeId> h(x.begin(), x.end());
    size_t in = m->input_dim;
    for (size_t l = 0; l < m->hidden.size(); ++l) {
      const size_t w = m->hidden[l];
      SliceRef s = find_layer(params_, "layer" + std::to_string(l), in, w);
      s.w += off;
      s.b += off;
      h = emit_tanh(g, emit_affine_layer(g, h, s));
      in = w;
    }
    SliceRef s = find_layer(params_, "output", in, 1);
    s.w += off;
    s.b += off;
    return emit_affine_layer(g, h, s)[0];
  }
  const auto& f = std::get<FourierNetSpec>(spec_);
  const size_t n = f.input_dim;
  std::vector<NodeId> concat;
  for (const auto& e : f.embeddings) {
    const size_t m = e.num_features;
    std::vector<NodeId> feat(2 * m);
    for (size_t j = 0; j < m; ++j) {
      NodeId r = g.affine_const(x, {e.wavenumbers.data() + j * n, n}, 0.0);
      NodeId cv = g.cos(r), sv = g.sin(r);
      const double a = e.scale.empty() ? 1.0 : e.scale[j];
      if (a != 1.0) {
        NodeId an = g.constant(a);
        cv = g.mul(an, cv);
        sv = g.mul(an, sv);
      }
      feat[j] = cv;
      feat[m + j] = sv;
    }
    std::vector<NodeId> h = feat;
    size_t in = 2 * m;
    for (size_t l = 0; l < f.extractor_hidden.size(); ++l) {
      const size_t w = f.extractor_hidden[l];
      SliceRef s = find_layer(params_, "extractor.layer" + std::to_string(l), in, w);
      s.w += off;
      s.b += off;
      h = emit_tanh(g, emit_affine_layer(g, h, s));
      in = w;
    }
    concat.insert(concat.end(), h.begin(), h.end());
  }
  SliceRef sd = find_layer(params_, "dense", concat.size(), f.dense_width);
  sd.w += off;
  sd.b += off;
  std::vector<NodeId> h = emit_tanh(g, emit_affine_layer(g, concat, sd));
  SliceRef so = find_layer(params_, "output", f.dense_width, 1);
  so.w += off;
  so.b += off;
  return emit_affine_layer(g, h, so)[0];
}

double Network::value(std::span<const double> x) const {
  std::vector<double> buf(value_graph_.size());
  eval(value_graph_, params_.values(), x, buf);
  return buf[value_node_];
}

DerivativeBundle Network::derivatives(std::span<const double> x) const {
  return input_derivatives(augmented_, x, params_.values());
}

namespace {

void glorot_layer(ParameterStore& ps, std::mt19937_64& rng, const std::string& name,
                  size_t in, size_t out) {
  size_t w_off = ps.add_slice(name + ".weight", in * out);
  ps.add_slice(name + ".bias", out);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(in + out)));
  std::span<double> w = ps.values().subspan(w_off, in * out);
  for (double& v : w) v = dist(rng);
}

}  // namespace

Network init_network(const NetworkSpec& spec, uint64_t seed) {
  validate_spec(spec);
  Network net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);

  if (auto* f = std::get_if<FourierNetSpec>(&net.spec_)) {
    // Wavenumber matrices are drawn first, in embedding order, then frozen.
    for (auto& e : f->embeddings) {
      std::normal_distribution<double> dist(0.0, e.sigma);
      e.wavenumbers.resize(static_cast<size_t>(e.num_features) * f->input_dim);
      for (double& v : e.wavenumbers) v = dist(rng);
    }
    size_t in = 2 * static_cast<size_t>(f->embeddings.front().num_features);
    for (size_t l = 0; l < f->extractor_hidden.size(); ++l) {
      glorot_layer(net.params_, rng, "extractor.layer" + std::to_string(l), in,
                   f->extractor_hidden[l]);
      in = f->extractor_hidden[l];
    }
    glorot_layer(net.params_, rng, "dense", in * f->embeddings.size(), f->dense_width);
    glorot_layer(net.params_, rng, "output", f->dense_width, 1);
  } else {
    const auto& m = std::get<MlpSpec>(net.spec_);
    size_t in = m.input_dim;
    for (size_t l = 0; l < m.hidden.size(); ++l) {
      glorot_layer(net.params_, rng, "layer" + std::to_string(l), in, m.hidden[l]);
      in = m.hidden[l];
    }
    glorot_layer(net.params_, rng, "output", in, 1);
  }
  net.params_.validate_layout();

  GraphBuilder gb;
  std::vector<NodeId> x(net.input_dim());
  for (int k = 0; k < net.input_dim(); ++k) x[k] = gb.input(k);
  net.value_node_ = net.emit(gb, x);
  net.value_graph_ = gb.take();
  net.augmented_ = augment(net.value_graph_, net.value_node_, net.input_dim(), 2);
  return net;
}

}  // namespace mlpinn
