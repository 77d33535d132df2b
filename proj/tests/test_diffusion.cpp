#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acpo/diffusion.hpp"
#include "acpo/grad_check.hpp"
#include "acpo/rng.hpp"

using namespace acpo;

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

PredictFn zero_predictor() {
  return [](const Tensor& x, int, std::optional<int>) {
    return Tensor::zeros(x.shape());
  };
}

}  // namespace

TEST_CASE("q_sample with zero noise scales the signal by sqrt(alpha_bar)") {
  NoiseSchedule s = make_schedule(10, 0.01, 0.2);
  Tensor x0 = Tensor::from({4}, {0.1, 0.4, 0.7, 1.0});
  Tensor eps = Tensor::zeros({4});
  Tensor xt = q_sample(x0, 6, eps, s);
  for (int i = 0; i < 4; ++i)
    REQUIRE(xt.at(i) == Catch::Approx(std::sqrt(s.alpha_bar[6]) * x0.at(i)).margin(1e-15));
}

TEST_CASE("q_sample with zero signal scales the noise by sqrt(1-alpha_bar)") {
  NoiseSchedule s = make_schedule(10, 0.01, 0.2);
  Rng rng(1);
  Tensor x0 = Tensor::zeros({5});
  Tensor eps = normal_tensor({5}, rng);
  Tensor xt = q_sample(x0, 3, eps, s);
  for (int i = 0; i < 5; ++i)
    REQUIRE(xt.at(i) ==
            Catch::Approx(std::sqrt(1.0 - s.alpha_bar[3]) * eps.at(i)).margin(1e-15));
}

TEST_CASE("q_sample matches the hand-computed value at alpha_bar 0.81") {
  NoiseSchedule s = make_schedule(2, 0.1, 0.1);  // alpha_bar[1] = 0.81
  Tensor x0 = Tensor::full({1}, 1.0);
  Tensor eps = Tensor::full({1}, 1.0);
  REQUIRE(q_sample(x0, 1, eps, s).item() ==
          Catch::Approx(1.3358898943540674).margin(1e-12));
}

TEST_CASE("q_sample rejects out-of-range timesteps") {
  NoiseSchedule s = make_schedule(5, 0.1, 0.2);
  Tensor x = Tensor::zeros({2});
  REQUIRE_THROWS_AS(q_sample(x, -1, x, s), ConfigError);
  REQUIRE_THROWS_AS(q_sample(x, 5, x, s), ConfigError);
}

TEST_CASE("reverse step with zero prediction and zero noise divides by sqrt(alpha)") {
  NoiseSchedule s = make_schedule(8, 0.05, 0.2);
  Tensor x = Tensor::from({3}, {0.3, -0.2, 0.9});
  Tensor prev = p_sample_step(zero_predictor(), x, 4, s, Tensor::zeros({3}));
  for (int i = 0; i < 3; ++i)
    REQUIRE(prev.at(i) == Catch::Approx(x.at(i) / std::sqrt(s.alpha[4])).margin(1e-15));
}

TEST_CASE("reverse step matches a hand-computed mean") {
  // T=2 ramp 0.1 -> 0.19 puts alpha_bar[1] = 0.9 * 0.81 = 0.729; at t=1 with
  // x_t = eps_hat = 0.5 the mean works out to 0.35278894...
  NoiseSchedule s = make_schedule(2, 0.1, 0.19);
  PredictFn half = [](const Tensor& x, int, std::optional<int>) {
    return Tensor::full(x.shape(), 0.5);
  };
  Tensor x = Tensor::full({1}, 0.5);
  Tensor prev = p_sample_step(half, x, 1, s, std::nullopt);
  REQUIRE(prev.item() == Catch::Approx(0.3527889408679073).margin(1e-12));
}

TEST_CASE("reverse step noise contract matches the final-step convention") {
  NoiseSchedule s = make_schedule(6, 0.05, 0.2);
  Tensor x = Tensor::zeros({2});
  REQUIRE_THROWS_AS(p_sample_step(zero_predictor(), x, 3, s, std::nullopt), ConfigError);
  REQUIRE_THROWS_AS(p_sample_step(zero_predictor(), x, 1, s, Tensor::zeros({2})),
                    ConfigError);
  REQUIRE_THROWS_AS(p_sample_step(zero_predictor(), x, 0, s, std::nullopt), ConfigError);
  REQUIRE_THROWS_AS(p_sample_step(zero_predictor(), x, 3, s, Tensor::zeros({3})),
                    ShapeError);
}

TEST_CASE("predictor forward is deterministic and shape preserving") {
  PredictorArch arch;
  arch.image_size = 4;
  arch.hidden = {12};
  arch.t_embed_dim = 6;
  NoisePredictor net(arch, 99);
  Rng rng(5);
  Tensor x = normal_tensor({16}, rng);
  Tensor a = predict_noise(net, x, 3);
  Tensor b = predict_noise(net, x, 3);
  REQUIRE(a.shape() == Shape{16});
  for (int i = 0; i < 16; ++i) REQUIRE(a.at(i) == b.at(i));
  Tensor c = predict_noise(net, x, 4);
  bool differs = false;
  for (int i = 0; i < 16; ++i) differs = differs || a.at(i) != c.at(i);
  REQUIRE(differs);  // timestep embedding must reach the output
}

TEST_CASE("predictor validates latent shape and condition usage") {
  PredictorArch arch;
  arch.image_size = 4;
  arch.hidden = {8};
  arch.t_embed_dim = 4;
  NoisePredictor net(arch, 1);
  REQUIRE_THROWS_AS(predict_noise(net, Tensor::zeros({9}), 1), ShapeError);
  REQUIRE_THROWS_AS(predict_noise(net, Tensor::zeros({16}), 1, 2), ShapeError);

  PredictorArch carch = arch;
  carch.cond_embed_dim = 3;
  carch.num_classes = 4;
  NoisePredictor cnet(carch, 1);
  REQUIRE_THROWS_AS(predict_noise(cnet, Tensor::zeros({16}), 1), ShapeError);
  REQUIRE_THROWS_AS(predict_noise(cnet, Tensor::zeros({16}), 1, 7), ShapeError);
  REQUIRE(predict_noise(cnet, Tensor::zeros({16}), 1, 2).numel() == 16);
}

TEST_CASE("gradients of a mean prediction reach the network parameters") {
  PredictorArch arch;
  arch.image_size = 3;
  arch.hidden = {6};
  arch.t_embed_dim = 4;
  NoisePredictor net(arch, 7);
  Rng rng(3);
  Tensor x = normal_tensor({9}, rng);

  std::vector<Tensor> leaves;
  for (const std::string& n : net.params().names()) leaves.push_back(net.params().get(n));
  Program f = [&net, &x](const std::vector<Tensor>&) {
    return mean(predict_noise(net, x, 2));
  };
  auto report = grad_check(f, leaves, 1e-5, 1e-4);
  REQUIRE(report.pass);
  REQUIRE(report.total_checked > 0);
}

TEST_CASE("sampling is seed-reproducible and lands in the unit interval") {
  PredictorArch arch;
  arch.image_size = 4;
  arch.hidden = {10};
  arch.t_embed_dim = 4;
  NoisePredictor net(arch, 21);
  NoiseSchedule s = make_schedule(20, 0.01, 0.2);

  SampleBatch a = sample_loop(net, s, 3, 77);
  SampleBatch b = sample_loop(net, s, 3, 77);
  REQUIRE(a.images.shape() == Shape{3, 16});
  for (int i = 0; i < a.images.numel(); ++i) {
    REQUIRE(a.images.at(i) == b.images.at(i));
    REQUIRE(a.images.at(i) >= 0.0);
    REQUIRE(a.images.at(i) <= 1.0);
  }
  SampleBatch c = sample_loop(net, s, 1, 78, std::nullopt, /*record_final=*/true);
  REQUIRE(c.raw.size() == 1);
  REQUIRE(c.raw[0].numel() == 16);
}

TEST_CASE("the differentiable chain tail carries gradients, the prefix does not") {
  PredictorArch arch;
  arch.image_size = 3;
  arch.hidden = {6};
  arch.t_embed_dim = 4;
  NoisePredictor net(arch, 13);
  NoiseSchedule s = make_schedule(12, 0.02, 0.2);
  Rng rng(4);
  ChainNoise cn = draw_chain_noise(rng, s, 9);

  Tensor x0 = sample_chain(predict_fn(net), s, cn, /*grad_tail=*/0);
  REQUIRE_FALSE(x0.requires_grad());

  Tensor x0g = sample_chain(predict_fn(net), s, cn, /*grad_tail=*/3);
  REQUIRE(x0g.requires_grad());
  net.params().zero_grads();
  backward(mean(x0g));
  double gsum = 0.0;
  for (double g : net.params().get("layer0.weight").grad()) gsum += std::abs(g);
  REQUIRE(gsum > 0.0);
}

TEST_CASE("denoising loss is zero for a perfect stub and one for an offset stub") {
  NoiseSchedule s = make_schedule(10, 0.01, 0.1);
  Rng rng(9);
  int B = 3, D = 4;
  DiffusionBatch batch;
  batch.x0 = normal_tensor({B, 2, 2}, rng);
  batch.epsilon = normal_tensor({B, 2, 2}, rng);
  batch.t = {1, 4, 8};

  // The loop visits samples in order, so a counting stub can replay the true
  // noise for each call.
  int call = 0;
  PredictFn perfect = [&](const Tensor&, int, std::optional<int>) {
    return slice_sample(batch.epsilon, call++);
  };
  REQUIRE(denoising_mse(perfect, batch, s).item() == Catch::Approx(0.0).margin(1e-15));

  call = 0;
  PredictFn off_by_one = [&](const Tensor&, int, std::optional<int>) {
    return add_scalar(slice_sample(batch.epsilon, call++), 1.0);
  };
  REQUIRE(denoising_mse(off_by_one, batch, s).item() == Catch::Approx(1.0).margin(1e-12));
  (void)D;
}

TEST_CASE("denoising loss gradients pass a finite-difference check on a tiny net") {
  PredictorArch arch;
  arch.image_size = 8;
  arch.hidden = {16};
  arch.t_embed_dim = 4;
  NoisePredictor net(arch, 3);
  NoiseSchedule s = make_schedule(10, 0.01, 0.1);
  Rng rng(8);
  DiffusionBatch batch;
  batch.x0 = normal_tensor({2, 8, 8}, rng);
  batch.epsilon = normal_tensor({2, 8, 8}, rng);
  batch.t = {2, 7};

  std::vector<Tensor> leaves;
  for (const std::string& n : net.params().names()) leaves.push_back(net.params().get(n));
  Program f = [&](const std::vector<Tensor>&) { return denoising_mse(net, batch, s); };
  auto report = grad_check(f, leaves, 1e-5, 1e-4);
  REQUIRE(report.pass);
}

TEST_CASE("closed-form predictor recovers the moments of 1-D Gaussian data") {
  // For x0 ~ N(m, s^2) the optimal prediction is available in closed form, so
  // the full reverse chain can be checked against the data moments.
  double m = 1.5, sd = 0.7;
  NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  PredictFn oracle = [&](const Tensor& x, int t, std::optional<int>) {
    double ab = sched.alpha_bar[t];
    double k = std::sqrt(1.0 - ab) / (sd * sd * ab + 1.0 - ab);
    return scale(add_scalar(x, -std::sqrt(ab) * m), k);
  };

  // The clipped images cannot carry Gaussian moments, so read the raw finals.
  int n = 300;
  double sum = 0.0, sum2 = 0.0;
  SampleBatch out = sample_loop(oracle, sched, n, 2026, 1, std::nullopt,
                                /*record_final=*/true);
  for (int i = 0; i < n; ++i) {
    double x = out.raw[i].item();
    sum += x;
    sum2 += x * x;
  }
  double mean_hat = sum / n;
  double var_hat = sum2 / n - mean_hat * mean_hat;
  double stderr_mean = sd / std::sqrt(static_cast<double>(n));
  REQUIRE(std::abs(mean_hat - m) < 3.0 * stderr_mean);
  REQUIRE(std::abs(var_hat - sd * sd) < 0.15 * sd * sd);
}
