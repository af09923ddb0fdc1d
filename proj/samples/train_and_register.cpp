// Trains a tiny descriptor network on a handful of synthetic pairs, then
// registers a held-out pair and compares against its ground truth.

#include <iostream>

#include "wsdesc/wsdesc.hpp"

using namespace wsdesc;

int main() {
  std::vector<PairSample> data;
  for (std::uint64_t s = 0; s < 8; ++s) {
    PairGenConfig gen;
    gen.crop_k = 128;
    gen.seed = s;
    data.push_back(make_pair(make_procedural_shape(100 + s, 170, 0.55), gen));
  }

  TrainConfig cfg;
  cfg.h = 8;
  cfg.channels = {4, 8};
  cfg.strides = {1, 2};
  cfg.kp_per_cloud = 16;
  cfg.steps = 20;
  TrainOptions opts;
  opts.on_record = [](const TrainLogRecord& r) {
    if (r.step % 5 == 0) std::cout << "step " << r.step << "  l_pcr " << r.l_pcr << "  support " << r.support << '\n';
  };
  const auto trained = train(data, init_network<float>(cfg.seed, cfg.network()), cfg, opts);

  PairGenConfig gen;
  gen.crop_k = 128;
  gen.seed = 99;
  const auto held_out = make_pair(make_procedural_shape(999, 170, 0.55), gen);
  try {
    const auto reg = register_pair(held_out.source, held_out.target, trained.params, 48, RansacConfig{});
    std::cout << "\nestimated:\n" << format_registration(reg.result) << "\nground truth:\n"
              << io::format_transform(held_out.gt.rotation, held_out.gt.translation) << '\n';
  } catch (const RegistrationFailed& e) {
    std::cout << "registration failed: " << e.what() << '\n';
    return 1;
  }
}
