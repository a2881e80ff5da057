#pragma once

// Small parameter building blocks. Every parameter-holding struct exposes
// visit(fn, prefix) which calls fn(name, Tensor&) for each leaf it owns;
// collecting into a ParamSet and loading from a checkpoint both go through it.

#include <cmath>
#include <string>

#include "trackdiff/checkpoint.hpp"
#include "trackdiff/tensor.hpp"

namespace trackdiff {

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline Tensor init_weight(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  const double sd = gain / std::sqrt(static_cast<double>(in));
  std::vector<double> v(in * out);
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::parameter({in, out}, std::move(v));
}

inline Tensor init_zeros(const Shape& shape) {
  return Tensor::parameter(shape, std::vector<double>(shape_size(shape), 0.0));
}

inline Tensor init_normal(const Shape& shape, Rng& rng, double sd) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::parameter(shape, std::move(v));
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
    return {init_weight(in, out, rng, gain), init_zeros({out})};
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, &bias); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "weight"), weight);
    fn(join_name(prefix, "bias"), bias);
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t d) {
    return {Tensor::parameter({d}, std::vector<double>(d, 1.0)), init_zeros({d})};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "gain"), gain);
    fn(join_name(prefix, "bias"), bias);
  }
};

/// Gathers every leaf of `module` into a ParamSet under its visit names.
template <class Module>
ParamSet collect_params(Module& module, const std::string& prefix = "") {
  ParamSet ps;
  module.visit([&](const std::string& name, Tensor& t) { ps.add(name, t); }, prefix);
  return ps;
}

/// Replaces leaves of `module` with same-named tensors from `ps`. Missing
/// names keep their current value unless `strict`. Returns the count loaded.
template <class Module>
std::size_t load_params(Module& module, const ParamSet& ps, bool strict, const std::string& prefix = "") {
  std::size_t loaded = 0;
  module.visit(
      [&](const std::string& name, Tensor& t) {
        if (!ps.contains(name)) {
          if (strict) throw IndexError("checkpoint lacks parameter '" + name + "'");
          return;
        }
        const auto& src = ps.at(name);
        if (src.shape() != t.shape()) {
          throw DimensionError("parameter '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                               shape_str(t.shape()));
        }
        t = Tensor::parameter(src.shape(), std::vector<double>(src.values().begin(), src.values().end()));
        ++loaded;
      },
      prefix);
  return loaded;
}

}  // namespace trackdiff
