#include "nrlab/neural.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "nrlab/io.hpp"

namespace nrlab {
namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mat activate(Activation a, const Mat& z) {
  switch (a) {
    case Activation::kGelu: return z.unaryExpr([](double v) { return gelu(v); });
    case Activation::kRelu: return z.cwiseMax(0.0);
    case Activation::kLinear: return z;
  }
  return z;
}

Mat activate_grad(Activation a, const Mat& z) {
  switch (a) {
    case Activation::kGelu: return z.unaryExpr([](double v) { return gelu_grad(v); });
    case Activation::kRelu: return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::kLinear: return Mat::Ones(z.rows(), z.cols());
  }
  return Mat::Ones(z.rows(), z.cols());
}

}  // namespace

const char* to_string(Activation a) {
  switch (a) {
    case Activation::kGelu: return "gelu";
    case Activation::kRelu: return "relu";
    case Activation::kLinear: return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& name) {
  if (name == "gelu") return Activation::kGelu;
  if (name == "relu") return Activation::kRelu;
  if (name == "linear") return Activation::kLinear;
  throw Error(Error::Kind::kParse, "unknown activation " + name);
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < w.size(); ++l) n += w[l].size() + b[l].size();
  return n;
}

Vec Mlp::flat() const {
  Vec out(param_count());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    out.segment(k, w[l].size()) = Eigen::Map<const Vec>(w[l].data(), w[l].size());
    k += w[l].size();
    out.segment(k, b[l].size()) = b[l];
    k += b[l].size();
  }
  return out;
}

void Mlp::set_flat(const Vec& theta) {
  if (static_cast<std::size_t>(theta.size()) != param_count()) {
    throw Error(Error::Kind::kDimension, "flat parameter length does not match the network");
  }
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    Eigen::Map<Vec>(w[l].data(), w[l].size()) = theta.segment(k, w[l].size());
    k += w[l].size();
    b[l] = theta.segment(k, b[l].size());
    k += b[l].size();
  }
}

Mlp mlp_init(const std::vector<int>& widths, std::uint64_t seed, Activation hidden,
             const std::vector<double>& dropout) {
  if (widths.size() < 2) throw Error(Error::Kind::kConfig, "an MLP needs at least input and output widths");
  for (int wd : widths) {
    if (wd <= 0) throw Error(Error::Kind::kConfig, "MLP layer widths must be positive");
  }
  const std::size_t layers = widths.size() - 1;
  if (!dropout.empty() && dropout.size() != layers) {
    throw Error(Error::Kind::kConfig, "dropout list must have one rate per layer");
  }
  Mlp m;
  m.widths = widths;
  Rng rng(seed);
  for (std::size_t l = 0; l < layers; ++l) {
    const double bound = std::sqrt(3.0 / widths[l]);
    Mat w(widths[l + 1], widths[l]);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
    }
    m.w.push_back(std::move(w));
    m.b.push_back(Vec::Zero(widths[l + 1]));
    m.activation.push_back(l + 1 == layers ? Activation::kLinear : hidden);
    m.dropout.push_back(dropout.empty() ? 0.0 : dropout[l]);
  }
  return m;
}

Mat mlp_forward(const Mlp& m, const Mat& x, bool train, Rng* rng, ForwardCache* cache) {
  if (x.rows() != m.input_dim()) throw Error(Error::Kind::kDimension, "MLP input dimension mismatch");
  if (cache) {
    cache->input = x;
    cache->pre.clear();
    cache->post.clear();
    cache->mask.clear();
  }
  Mat h = x;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    Mat z = m.w[l] * h;
    z.colwise() += m.b[l];
    Mat a = activate(m.activation[l], z);
    Mat mask;
    const double p = m.dropout[l];
    if (train && p > 0.0) {
      if (!rng) throw Error(Error::Kind::kConfig, "dropout in training mode needs a generator");
      mask.resize(a.rows(), a.cols());
      const double keep = 1.0 / (1.0 - p);
      for (Eigen::Index j = 0; j < mask.cols(); ++j) {
        for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng->uniform() < p ? 0.0 : keep;
      }
      a = a.cwiseProduct(mask);
    }
    if (cache) {
      cache->pre.push_back(std::move(z));
      cache->post.push_back(a);
      cache->mask.push_back(std::move(mask));
    }
    h = std::move(a);
  }
  return h;
}

Vec mlp_forward(const Mlp& m, const Vec& x) {
  const Mat out = mlp_forward(m, Mat(x), false, nullptr, nullptr);
  return out.col(0);
}

Mat mlp_backward(const Mlp& m, const ForwardCache& cache, const Mat& d_out, Vec& grad) {
  if (static_cast<std::size_t>(grad.size()) != m.param_count()) {
    throw Error(Error::Kind::kDimension, "gradient buffer length does not match the network");
  }
  // Offsets of each layer in the flat layout.
  std::vector<Eigen::Index> offset(m.layers());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    offset[l] = k;
    k += m.w[l].size() + m.b[l].size();
  }
  Mat delta = d_out;
  for (std::size_t l = m.layers(); l-- > 0;) {
    if (cache.mask[l].size() != 0) delta = delta.cwiseProduct(cache.mask[l]);
    delta = delta.cwiseProduct(activate_grad(m.activation[l], cache.pre[l]));
    const Mat& h_in = l == 0 ? cache.input : cache.post[l - 1];
    Eigen::Map<Mat> gw(grad.data() + offset[l], m.w[l].rows(), m.w[l].cols());
    gw.noalias() += delta * h_in.transpose();
    grad.segment(offset[l] + m.w[l].size(), m.b[l].size()) += delta.rowwise().sum();
    delta = m.w[l].transpose() * delta;
  }
  return delta;
}

Adam::Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {}

void Adam::step(Vec& params, const Vec& grad) {
  if (grad.size() != params.size() || grad.size() != m_.size()) {
    throw Error(Error::Kind::kDimension, "Adam state does not match parameter length");
  }
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  if (cfg_.weight_decay > 0.0) params *= 1.0 - cfg_.lr * cfg_.weight_decay;
  params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

double clip_grad_norm(Vec& grad, double max_norm) {
  const double norm = grad.norm();
  if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
  return norm;
}

std::string mlp_serialize(const Mlp& m) {
  std::string out = "mlp-widths";
  for (int w : m.widths) out += " " + std::to_string(w);
  out += "\nmlp-activations";
  for (Activation a : m.activation) out += std::string(" ") + to_string(a);
  out += "\nmlp-dropout";
  for (double p : m.dropout) out += " " + fmt(p);
  out += "\nmlp-params " + std::to_string(m.param_count()) + "\n";
  const Vec theta = m.flat();
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    out += fmt(theta[i]);
    out += '\n';
  }
  return out;
}

Mlp mlp_deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Mlp m;
  std::size_t count = 0;
  bool have_params = false;
  while (!have_params && std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "mlp-widths") {
      int w;
      while (ls >> w) m.widths.push_back(w);
    } else if (key == "mlp-activations") {
      std::string a;
      while (ls >> a) m.activation.push_back(activation_from_string(a));
    } else if (key == "mlp-dropout") {
      std::string p;
      while (ls >> p) m.dropout.push_back(parse_double(p));
    } else if (key == "mlp-params") {
      ls >> count;
      have_params = true;
    }
  }
  if (!have_params || m.widths.size() < 2 || m.activation.size() + 1 != m.widths.size() ||
      m.dropout.size() + 1 != m.widths.size()) {
    throw Error(Error::Kind::kParse, "malformed MLP checkpoint header");
  }
  for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
    m.w.emplace_back(Mat::Zero(m.widths[l + 1], m.widths[l]));
    m.b.emplace_back(Vec::Zero(m.widths[l + 1]));
  }
  if (count != m.param_count()) throw Error(Error::Kind::kParse, "MLP checkpoint parameter count mismatch");
  Vec theta(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw Error(Error::Kind::kParse, "truncated MLP checkpoint");
    theta[static_cast<Eigen::Index>(i)] = parse_double(line);
  }
  m.set_flat(theta);
  return m;
}

}  // namespace nrlab
