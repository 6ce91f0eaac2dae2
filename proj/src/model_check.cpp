#include "poroperm/model_check.hpp"

#include <algorithm>

#include "poroperm/random.hpp"
#include "poroperm/sampler.hpp"

namespace poroperm {

namespace {

void merge(ModelGradCheckResult& into, const GradCheckReport& r) {
  into.max_rel_error = std::max(into.max_rel_error, r.max_rel_error);
  into.checked += r.checked;
  into.skipped_kinks += r.skipped_kinks;
  into.refined += r.refined;
  into.reports.push_back(r);
}

}  // namespace

ModelGradCheckResult check_model_gradients(const ArchConfig& base, HeadKind head, const ModelGradCheckOptions& options) {
  ArchConfig arch = base;
  arch.head = head;
  arch.validate();
  const std::size_t e = arch.edge;
  const auto params = init_parameters<double>(arch, derive_seed(options.seed, {stream::init}));

  ModelGradCheckResult result;
  for (std::size_t i = 0; i < options.inputs; ++i) {
    Rng rng(derive_seed(options.seed, {stream::gradcheck, static_cast<std::uint64_t>(head), i}));
    SubCube cube{e, std::vector<float>(e * e * e), {}, 0};
    for (auto& v : cube.values) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;

    std::vector<double> input;
    RestorationTarget<double> target;
    if (head == HeadKind::ssl_restore) {
      const auto masked = apply_mask(cube, MaskSpec{options.mask_rate, MaskMode::voxel, 0.5f, rng.next_u64()});
      input.assign(masked.input.begin(), masked.input.end());
      target = make_restoration_target<double>(arch, masked.target, masked.mask);
    } else {
      input.assign(cube.values.begin(), cube.values.end());
      target.values = Tensor<double>({2}, std::vector<double>{rng.normal(), rng.normal()});
    }

    const Objective objective = [&](const ParameterSet<double>& p, ParameterSet<double>* grads) {
      Graph<double> g;
      const Var out = build_forward<double>(g, arch, p, grads, input);
      const Var loss = target.mask.empty() ? mse<double>(g, out, target.values)
                                           : mse(g, out, target.values, std::span<const std::uint32_t>(target.mask));
      if (grads) g.backward(loss);
      return Evaluation{g.value(loss)[0], g.branch_signature()};
    };
    // Same loss in long double, used only to re-difference coordinates the
    // double pass cannot resolve.
    const std::vector<long double> input_ext(input.begin(), input.end());
    const auto target_ext = target.values.template cast<long double>();
    auto params_ext = params.template cast<long double>();
    const Objective extended = [&](const ParameterSet<double>& p, ParameterSet<double>*) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        const auto src = p[k].tensor.data();
        std::copy(src.begin(), src.end(), params_ext[k].tensor.raw());
      }
      Graph<long double> g;
      const Var out = build_forward<long double>(g, arch, params_ext, nullptr, input_ext);
      const Var loss = target.mask.empty()
                           ? mse<long double>(g, out, target_ext)
                           : mse(g, out, target_ext, std::span<const std::uint32_t>(target.mask));
      return Evaluation{g.value(loss)[0], g.branch_signature()};
    };
    GradCheckOptions go;
    go.fd_epsilon = options.fd_epsilon;
    go.coords_per_tensor = options.coords_per_tensor;
    go.refine = extended;
    go.seed = derive_seed(options.seed, {stream::gradcheck, static_cast<std::uint64_t>(head), i, 1});
    merge(result, grad_check(objective, params, go));
  }
  return result;
}

ModelGradCheckResult check_model_gradients(const ArchConfig& arch, const ModelGradCheckOptions& options) {
  ModelGradCheckResult all;
  for (HeadKind h : {HeadKind::ssl_restore, HeadKind::regress2}) {
    const auto r = check_model_gradients(arch, h, options);
    for (const auto& rep : r.reports) merge(all, rep);
  }
  return all;
}

}  // namespace poroperm
