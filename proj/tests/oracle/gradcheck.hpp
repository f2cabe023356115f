#pragma once

// Central finite differences of the reference losses against tape gradients
// for every parameter of a randomly initialised net.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dseg/losses.hpp"
#include "dseg/model.hpp"
#include "dseg/rng.hpp"
#include "oracle/reference.hpp"

namespace gradcheck {

struct Problem {
  dseg::DeferralNet net;
  std::size_t h = 8, w = 8;
  std::vector<dseg::ValueGrid> images;
  std::vector<dseg::BinaryGrid> truths;
  std::vector<std::vector<dseg::BinaryGrid>> experts;
  dseg::LossConfig cfg;
};

inline Problem make_problem(std::uint64_t seed, std::size_t J = 3, std::size_t batch = 2, std::size_t hw = 8) {
  using namespace dseg;
  Problem p;
  p.h = p.w = hw;
  p.net = init(seed, NetShape{J, 16, 8, hw, hw});
  Rng rng(derive_seed(seed, {99}));
  for (std::size_t k = 0; k < kParamCount; ++k) {
    if (DeferralNet::fan_in(static_cast<ParamId>(k), p.net.shape()) != 0) continue;
    for (double& b : p.net.param(static_cast<ParamId>(k)).data()) b = uniform01(rng) - 0.5;
  }
  for (std::size_t b = 0; b < batch; ++b) {
    ValueGrid img(1, hw, hw);
    for (double& v : img.data()) v = uniform01(rng);
    BinaryGrid t(hw, hw);
    for (std::size_t i = 0; i < t.size(); ++i) t.set(i, uniform01(rng) < 0.4);
    std::vector<BinaryGrid> ex;
    for (std::size_t j = 0; j < J; ++j) {
      BinaryGrid m(hw, hw);
      for (std::size_t i = 0; i < m.size(); ++i) m.set(i, uniform01(rng) < 0.85 ? t[i] != 0 : t[i] == 0);
      ex.push_back(std::move(m));
    }
    p.images.push_back(std::move(img));
    p.truths.push_back(std::move(t));
    p.experts.push_back(std::move(ex));
  }
  return p;
}

enum class Which { DC, SC, LB, Total };

inline const char* name(Which w) {
  switch (w) {
    case Which::DC: return "dc_loss";
    case Which::SC: return "sc_loss";
    case Which::LB: return "lb_penalty";
    default: return "total_loss";
  }
}

struct Frozen {
  std::vector<std::vector<int>> model_correct, pseudo;
};

inline std::vector<int> ints(const dseg::BinaryGrid& g) { return {g.data().begin(), g.data().end()}; }

// Reference objective with indicator fields held fixed.
inline double reference_loss(const Problem& p, const dseg::DeferralNet& net, Which which, const Frozen* frozen,
                             Frozen* capture = nullptr) {
  const std::size_t B = p.images.size(), P = p.h * p.w, C = net.experts() + 1;
  double dc = 0.0, sc = 0.0;
  std::vector<ref::Vec> probs;
  for (std::size_t b = 0; b < B; ++b) {
    const ref::Outputs o = ref::forward(net, ref::flat(p.images[b]), p.h, p.w);
    const auto truth = ints(p.truths[b]);
    std::vector<std::vector<int>> ex;
    for (const auto& m : p.experts[b]) ex.push_back(ints(m));
    const auto mc = frozen ? frozen->model_correct[b] : ref::model_correct(o.seg, truth);
    const auto ps = frozen ? frozen->pseudo[b] : ref::pseudo(o.probs, C, P);
    if (capture) {
      capture->model_correct.push_back(mc);
      capture->pseudo.push_back(ps);
    }
    dc += ref::dc(o.seg, o.probs, truth, ex, mc);
    sc += ref::sc(o.dmap, o.probs, C, ps, p.cfg.beta1, p.cfg.beta2);
    probs.push_back(o.probs);
  }
  dc /= static_cast<double>(B);
  sc /= static_cast<double>(B);
  const double lb = ref::lb(ref::rho(probs, C, P), p.cfg.lb_lower, p.cfg.lb_upper);
  switch (which) {
    case Which::DC: return dc;
    case Which::SC: return sc;
    case Which::LB: return lb;
    default: return dc + p.cfg.lambda1 * sc + p.cfg.lb_weight(net.experts()) * lb;
  }
}

inline dseg::DeferralNet::Params tape_gradient(const Problem& p, Which which, double* value = nullptr) {
  using namespace dseg;
  Tape tape;
  const ParamBinding pb = bind(p.net, tape);
  std::vector<ForwardVars> outs;
  for (const auto& img : p.images) outs.push_back(forward(pb, tape.constant(img)));
  TotalLoss tl = total_loss(outs, p.truths, p.experts, p.cfg);
  Var target = which == Which::DC ? tl.dc : which == Which::SC ? tl.sc : which == Which::LB ? tl.lb : tl.total;
  if (value) *value = target.value().item();
  tape.backward(target);
  return pb.gradients();
}

struct Report {
  double max_rel = 0.0;
  double max_abs = 0.0;
  double value_tape = 0.0, value_ref = 0.0;
  std::size_t params = 0;
  std::string worst;
};

// Relative error |a - f| / max(|a|, |f|, floor).
inline Report check(const Problem& p, Which which, double h = 1e-4, double floor = 1e-6) {
  Report r;
  const auto grads = tape_gradient(p, which, &r.value_tape);
  Frozen frozen;
  r.value_ref = reference_loss(p, p.net, which, nullptr, &frozen);
  dseg::DeferralNet probe = p.net;
  for (std::size_t k = 0; k < dseg::kParamCount; ++k) {
    auto data = probe.params()[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = reference_loss(p, probe, which, &frozen);
      data[i] = orig - h;
      const double fm = reference_loss(p, probe, which, &frozen);
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = grads[k][i];
      const double abs_err = std::abs(an - fd);
      const double rel = abs_err / std::max({std::abs(an), std::abs(fd), floor});
      ++r.params;
      r.max_abs = std::max(r.max_abs, abs_err);
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = std::string(dseg::kParamNames[k]) + "[" + std::to_string(i) + "] analytic=" + std::to_string(an) +
                  " fd=" + std::to_string(fd);
      }
    }
  }
  return r;
}

}  // namespace gradcheck
