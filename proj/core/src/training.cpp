#include "npp/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "npp/checkpoint.hpp"
#include "npp/errors.hpp"
#include "npp/losses.hpp"
#include "npp/tensor_ops.hpp"

namespace npp::training {

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw config_error(std::string("train config: ") + what);
  };
  need(lr0 > 0, "lr0 must be positive");
  need(max_epochs > 0, "max_epochs must be positive");
  need(halve_epoch >= 0, "halve_epoch must be non-negative");
  need(batch_size > 0, "batch_size must be positive");
  need(adam_beta1 > 0 && adam_beta1 < 1, "adam_beta1 must lie in (0,1)");
  need(adam_beta2 > 0 && adam_beta2 < 1, "adam_beta2 must lie in (0,1)");
  need(adam_eps > 0, "adam_eps must be positive");
  need(lambda_log10_lo < lambda_log10_hi, "lambda log10 range must have low < high");
  need(checkpoint_every > 0, "checkpoint_every must be positive");
  need(std::isfinite(fixed_lambda), "fixed_lambda must be finite");
}

double sample_lambda(Rng& rng, const TrainConfig& cfg) {
  return std::pow(10.0, rng.uniform(cfg.lambda_log10_lo, cfg.lambda_log10_hi));
}

double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw domain_error("lr_at_epoch: negative epoch");
  return epoch < cfg.halve_epoch ? cfg.lr0 : cfg.lr0 * 0.5;
}

void adam_step(ad::ParamStore<float>& params,
               const std::map<std::string, std::vector<float>>& grads, OptState& state, double lr,
               const TrainConfig& cfg) {
  // Validate everything before mutating anything: a skipped step must leave
  // parameters, moments and the step count untouched.
  for (const auto& [name, t] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw domain_error("adam_step: missing gradient for " + name);
    if (static_cast<int64_t>(it->second.size()) != t.size())
      throw shape_error("adam_step: gradient size mismatch for " + name);
    for (float gv : it->second)
      if (!std::isfinite(gv))
        throw abort_step_error("adam_step: non-finite gradient in " + name);
  }

  const uint64_t t = ++state.step;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    const std::vector<float>& g = grads.at(name);
    std::vector<float>& m = state.m[name];
    std::vector<float>& v = state.v[name];
    if (m.size() != g.size()) m.assign(g.size(), 0.0f);
    if (v.size() != g.size()) v.assign(g.size(), 0.0f);
    float* pv = p.vals->data();
    for (size_t i = 0; i < g.size(); ++i) {
      const double gd = static_cast<double>(g[i]);
      const double mi = cfg.adam_beta1 * static_cast<double>(m[i]) + (1.0 - cfg.adam_beta1) * gd;
      const double vi =
          cfg.adam_beta2 * static_cast<double>(v[i]) + (1.0 - cfg.adam_beta2) * gd * gd;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      pv[i] = static_cast<float>(static_cast<double>(pv[i]) -
                                 lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

namespace {

void require_compatible(const model::ModelConfig& a, const model::ModelConfig& b) {
  const bool same = a.levels == b.levels && a.base_channels == b.base_channels &&
                    a.max_channels == b.max_channels && a.convs_per_level == b.convs_per_level &&
                    a.bottleneck_blocks == b.bottleneck_blocks && a.heads == b.heads &&
                    a.mlp_ratio == b.mlp_ratio && a.leaky_slope == b.leaky_slope &&
                    a.multiplier_downsample == b.multiplier_downsample && a.mode == b.mode &&
                    a.hyper_hidden == b.hyper_hidden;
  if (!same) throw config_error("resume: checkpoint model configuration differs from the run's");
}

// Offending-batch dump next to the checkpoint so the failure is inspectable.
void dump_batch(const TrainPaths& paths, int64_t step, double lambda,
                const std::vector<io::Volume>& inputs, const std::vector<uint64_t>& seeds) {
  const std::filesystem::path dir =
      paths.checkpoint_path.parent_path() / ("dump_step_" + std::to_string(step));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) return;  // dumping is best-effort; the abort itself still fires
  std::ofstream info(dir / "batch.txt");
  info << "step " << step << "\nlambda " << lambda << "\nseeds";
  for (uint64_t s : seeds) info << " " << s;
  info << "\n";
  for (size_t i = 0; i < inputs.size(); ++i)
    io::write_nifti(inputs[i], dir / ("input_" + std::to_string(i) + ".nii"));
}

}  // namespace

TrainResult train(model::NppModel<float>& m, const dataset::Manifest& data,
                  const TrainConfig& cfg, const TrainPaths& paths,
                  const std::optional<std::filesystem::path>& resume_from) {
  cfg.validate();
  m.config.validate();
  if (data.entries.empty()) throw domain_error("train: dataset is empty");
  const int64_t divisor = int64_t(1) << (m.config.levels - 1);
  for (int64_t d : data.dims)
    if (d % divisor != 0)
      throw config_error("train: grid extent " + std::to_string(d) +
                         " not divisible by 2^(levels-1) = " + std::to_string(divisor));

  // The desk-scale corpus fits in memory; load it once up front.
  const size_t n = data.entries.size();
  std::vector<io::Volume> xs(n);
  std::vector<ad::Tensor<float>> gts(n);
  std::vector<uint64_t> seeds(n);
  for (size_t i = 0; i < n; ++i) {
    phantom::PhantomSample s = dataset::load_sample(data, i, paths.data_root);
    xs[i] = std::move(s.x);
    gts[i] = io::to_tensor<float>(s.x_gt);
    seeds[i] = s.seed;
  }

  Rng rng(cfg.seed);
  OptState opt;
  for (const auto& [name, t] : m.params) {
    opt.m[name].assign(static_cast<size_t>(t.size()), 0.0f);
    opt.v[name].assign(static_cast<size_t>(t.size()), 0.0f);
  }
  int start_epoch = 0;
  int64_t gstep = 0;

  if (resume_from) {
    Checkpoint ck = load_checkpoint(*resume_from);
    require_compatible(ck.model_config, m.config);
    if (ck.grid_dims != data.dims)
      throw config_error("resume: checkpoint grid differs from the dataset's");
    ad::ParamStore<float> fresh;
    for (const auto& [name, t] : ck.params) fresh.add(name, t.shape, *t.vals);
    m.params = std::move(fresh);
    opt = ck.opt;
    rng.load_state(ck.rng_state);
    start_epoch = static_cast<int>(ck.epoch);
    gstep = ck.step;
  }

  std::ofstream log(paths.log_path,
                    resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw io_error("cannot open training log: " + paths.log_path.string());

  TrainResult res;
  int consecutive_skips = 0;
  std::vector<size_t> order(n);

  for (int epoch = start_epoch; epoch < cfg.max_epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    // The permutation restarts from the identity so it is a pure function
    // of the RNG state at the epoch boundary; a resumed run then shuffles
    // exactly like the uninterrupted one.
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i) + 1))]);

    double epoch_sum = 0.0;
    int64_t epoch_batches = 0;
    for (size_t b0 = 0; b0 < n; b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t bsz = std::min(static_cast<size_t>(cfg.batch_size), n - b0);
      // Fixed draw order per step: one gamma per sample, then the batch λ.
      std::vector<double> gammas(bsz);
      for (double& gam : gammas) gam = phantom::sample_gamma(rng);
      const double lambda =
          cfg.fixed_lambda > 0.0 ? cfg.fixed_lambda : sample_lambda(rng, cfg);

      ad::Tape<float> tape;
      ad::ParamStore<float> wp = m.params.watch_all(tape);
      ad::Tensor<float> total;
      double rec_mean = 0.0, tv_mean = 0.0;
      std::vector<io::Volume> batch_inputs;
      for (size_t s = 0; s < bsz; ++s) {
        const size_t i = order[b0 + s];
        io::Volume xa = phantom::gamma_apply(xs[i], gammas[s]);
        model::NppOutput<float> out =
            model::forward(tape, m.config, wp, io::to_tensor<float>(xa), lambda, true);
        losses::Objective<float> obj = losses::npp_objective(tape, out, gts[i], lambda);
        rec_mean += static_cast<double>(obj.rec.scalar()) / static_cast<double>(bsz);
        tv_mean += static_cast<double>(obj.tv.scalar()) / static_cast<double>(bsz);
        total = s == 0 ? obj.total : ad::add(tape, total, obj.total);
        batch_inputs.push_back(std::move(xa));
      }
      total = ad::mul_scalar(tape, total, 1.0 / static_cast<double>(bsz));
      const double tot = static_cast<double>(total.scalar());
      ++gstep;

      if (!std::isfinite(tot)) {
        std::vector<uint64_t> batch_seeds;
        for (size_t s = 0; s < bsz; ++s) batch_seeds.push_back(seeds[order[b0 + s]]);
        dump_batch(paths, gstep, lambda, batch_inputs, batch_seeds);
        throw numeric_error("train: non-finite loss at step " + std::to_string(gstep) +
                            " (batch dumped next to the checkpoint)");
      }

      tape.backward(total);
      std::map<std::string, std::vector<float>> grads;
      for (const auto& [name, t] : wp) grads.emplace(name, tape.grad(t));

      bool skipped = false;
      try {
        adam_step(m.params, grads, opt, lr, cfg);
        consecutive_skips = 0;
      } catch (const abort_step_error&) {
        skipped = true;
        ++res.skipped_steps;
        if (++consecutive_skips > 10)
          throw numeric_error("train: more than 10 consecutive non-finite-gradient steps");
      }

      char line[256];
      std::snprintf(line, sizeof(line), "%lld %d %.9g %.9g %.9g %.9g %.9g%s\n",
                    static_cast<long long>(gstep), epoch, lambda, rec_mean, tv_mean, tot, lr,
                    skipped ? " skipped" : "");
      log << line;
      epoch_sum += tot;
      ++epoch_batches;
    }

    const double epoch_mean = epoch_sum / static_cast<double>(epoch_batches);
    if (epoch == start_epoch) res.first_epoch_mean_total = epoch_mean;
    res.last_epoch_mean_total = epoch_mean;
    res.steps = gstep;

    if ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.max_epochs) {
      Checkpoint ck;
      ck.model_config = m.config;
      ck.train_config = cfg;
      ck.grid_dims = data.dims;
      ck.epoch = epoch + 1;
      ck.step = gstep;
      ck.params = m.params;
      ck.opt = opt;
      ck.rng_state = rng.save_state();
      save_checkpoint(ck, paths.checkpoint_path);
    }
    log.flush();
  }
  return res;
}

}  // namespace npp::training
