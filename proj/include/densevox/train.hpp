#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "densevox/checkpoint.hpp"
#include "densevox/infer.hpp"
#include "densevox/metrics.hpp"
#include "densevox/net.hpp"

namespace dv {

struct TrainConfig {
  int epochs = 30;
  int subepochs = 20;
  int samples_per_subepoch = 1000;
  int batch_size = 5;
  double initial_lr = 0.001;
  double momentum = 0.6;
  double rms_decay = 0.9;
  double rms_epsilon = 1e-4;
  std::int64_t train_edge = 27;
  std::uint64_t seed = 1;
  bool balanced_sampling = true;
  double dropout_rate = 0.5;

  void validate(const NetworkSpec& spec) const {
    if (epochs < 1 || subepochs < 1 || samples_per_subepoch < 1 || batch_size < 1)
      fail(ErrorCategory::data_invalid, "InvalidSpec", "non-positive training counts");
    if (samples_per_subepoch % batch_size != 0)
      fail(ErrorCategory::data_invalid, "InvalidSpec", "samples per subepoch must divide by batch size");
    const std::int64_t min_edge = 2 * spec.receptive_margin() + 1;
    if (train_edge % 2 == 0 || train_edge < min_edge)
      fail(ErrorCategory::data_invalid, "InvalidSpec",
           "training edge must be odd and >= " + std::to_string(min_edge));
  }
};

// Initial LR held for epochs 1-9, halved at the start of epochs 10, 15, 20, ...
inline double lr_schedule(int epoch, double initial_lr = 0.001) {
  if (epoch < 1) fail(ErrorCategory::data_invalid, "InvalidSpec", "epoch is 1-based");
  if (epoch < 10) return initial_lr;
  return initial_lr / std::pow(2.0, 1 + (epoch - 10) / 5);
}

// RMSprop with momentum:
//   cache <- d*cache + (1-d)*g^2
//   step  <- lr*g / sqrt(cache + eps)
//   vel   <- mu*vel - step
//   p     <- p + vel
inline void rmsprop_step(ParamSet<float>& params, const ParamSet<float>& grads, OptimizerState& st,
                         double lr, double decay = 0.9, double eps = 1e-4, double momentum = 0.6) {
  if (params.values.size() != grads.values.size())
    fail(ErrorCategory::data_invalid, "ShapeMismatch", "params vs grads");
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    Tensor<float>& p = params.values[i];
    const Tensor<float>& g = grads.values[i];
    Tensor<float>& c = st.cache[i];
    Tensor<float>& v = st.velocity[i];
    if (p.shape != g.shape) fail(ErrorCategory::data_invalid, "ShapeMismatch", "grad shape");
    for (std::int64_t k = 0; k < p.numel(); ++k) {
      const double gg = g[k];
      const double cc = decay * c[k] + (1 - decay) * gg * gg;
      c[k] = static_cast<float>(cc);
      const double step = lr * gg / std::sqrt(cc + eps);
      const double vel = momentum * v[k] - step;
      v[k] = static_cast<float>(vel);
      p[k] = static_cast<float>(p[k] + vel);
    }
  }
}

// ---------------------------------------------------------------------------
// Sub-volume sampling.

struct PreparedSubject {
  std::array<std::int64_t, 3> dims;
  std::vector<std::vector<float>> mods;      // standardized modalities
  std::vector<std::uint8_t> labels;
  std::array<std::vector<std::int64_t>, 4> class_voxels;  // flat indices per class
  std::vector<std::int64_t> mask_voxels;
};

inline PreparedSubject prepare_subject(const Subject& s) {
  s.validate();
  if (!s.labels) fail(ErrorCategory::data_invalid, "MissingLabels", s.id);
  PreparedSubject p;
  p.dims = s.modalities[0].dims;
  const Volume* mask = s.mask ? &*s.mask : nullptr;
  for (const auto& m : s.modalities) p.mods.push_back(standardize(m, mask));
  p.labels.resize(static_cast<std::size_t>(s.labels->numel()));
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const auto lbl = static_cast<std::uint8_t>(s.labels->data[i]);
    p.labels[i] = lbl;
    p.class_voxels[lbl].push_back(static_cast<std::int64_t>(i));
    if (!mask || mask->data[i] != 0.f) p.mask_voxels.push_back(static_cast<std::int64_t>(i));
  }
  if (p.mask_voxels.empty()) fail(ErrorCategory::data_invalid, "EmptyMask", s.id);
  return p;
}

struct SampleDraw {
  int subject;
  std::array<std::int64_t, 3> center;
};

// Balanced mode draws the target class uniformly from {0..3}, then a uniform
// voxel of that class as center; a class absent from the chosen subject falls
// back to an unbalanced draw (counted in *fallbacks). Unbalanced mode draws a
// uniform center within the brain mask.
inline std::vector<SampleDraw> draw_samples(const std::vector<PreparedSubject>& subjects, int n,
                                            Rng& rng, bool balanced, std::int64_t* fallbacks = nullptr) {
  std::vector<SampleDraw> draws;
  draws.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int si = static_cast<int>(rng.uniform_index(subjects.size()));
    const PreparedSubject& s = subjects[static_cast<std::size_t>(si)];
    std::int64_t flat = -1;
    if (balanced) {
      const auto cls = rng.uniform_index(4);
      const auto& vox = s.class_voxels[cls];
      if (!vox.empty()) {
        flat = vox[rng.uniform_index(vox.size())];
      } else if (fallbacks) {
        ++*fallbacks;
      }
    }
    if (flat < 0) flat = s.mask_voxels[rng.uniform_index(s.mask_voxels.size())];
    const std::int64_t z = flat / (s.dims[1] * s.dims[2]);
    const std::int64_t y = (flat / s.dims[2]) % s.dims[1];
    const std::int64_t x = flat % s.dims[2];
    draws.push_back({si, {z, y, x}});
  }
  return draws;
}

struct Batch {
  std::vector<Tensor<float>> stream_inputs;  // one [B,C,e,e,e] per stream
  LabelArray targets;                        // [B,ce,ce,ce] core labels
};

// Materialize input windows (zero-padded at borders) and centered label cores
// for a run of draws.
inline Batch make_batch(const std::vector<PreparedSubject>& subjects,
                        const std::vector<SampleDraw>& draws, std::size_t first, std::size_t count,
                        const NetworkSpec& spec, std::int64_t edge) {
  const std::int64_t margin = spec.receptive_margin();
  const std::int64_t core = edge - 2 * margin;
  const auto B = static_cast<std::int64_t>(count);

  Batch batch;
  const int streams = spec.streams;
  const std::int64_t cps = spec.input_channels_per_stream;
  for (int s = 0; s < streams; ++s)
    batch.stream_inputs.emplace_back(Shape{B, cps, edge, edge, edge});
  batch.targets = LabelArray{Shape{B, core, core, core}};

  for (std::int64_t b = 0; b < B; ++b) {
    const SampleDraw& d = draws[first + static_cast<std::size_t>(b)];
    const PreparedSubject& subj = subjects[static_cast<std::size_t>(d.subject)];
    const std::array<std::int64_t, 3> origin = {d.center[0] - (edge - 1) / 2,
                                                d.center[1] - (edge - 1) / 2,
                                                d.center[2] - (edge - 1) / 2};
    for (int s = 0; s < streams; ++s) {
      Tensor<float> win{Shape{1, cps, edge, edge, edge}};
      for (std::int64_t c = 0; c < cps; ++c)
        extract_window(subj.mods[static_cast<std::size_t>(streams == 2 ? s : c)], subj.dims, origin,
                       edge, win, c);
      std::copy_n(win.ptr(), win.numel(),
                  batch.stream_inputs[static_cast<std::size_t>(s)].ptr() + b * cps * edge * edge * edge);
    }
    // label core, zero (background) outside the volume
    std::uint8_t* t = batch.targets.ptr() + b * core * core * core;
    for (std::int64_t z = 0; z < core; ++z)
      for (std::int64_t y = 0; y < core; ++y)
        for (std::int64_t x = 0; x < core; ++x) {
          const std::int64_t vz = origin[0] + margin + z;
          const std::int64_t vy = origin[1] + margin + y;
          const std::int64_t vx = origin[2] + margin + x;
          std::uint8_t lbl = 0;
          if (vz >= 0 && vz < subj.dims[0] && vy >= 0 && vy < subj.dims[1] && vx >= 0 &&
              vx < subj.dims[2])
            lbl = subj.labels[static_cast<std::size_t>((vz * subj.dims[1] + vy) * subj.dims[2] + vx)];
          t[(z * core + y) * core + x] = lbl;
        }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainLogEntry {
  int epoch;
  int subepoch;  // 0 for validation entries
  double lr;
  double loss;   // NaN for validation entries
  double dc_csf, dc_gm, dc_wm, dc_mean;
  std::string phase;  // "train" or "val"
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::vector<TrainLogEntry> log;
  double wall_seconds = 0;
  std::int64_t sampler_fallbacks = 0;
};

inline void write_train_log_csv(const std::filesystem::path& path,
                                const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path);
  if (!f) fail(ErrorCategory::io, "WriteFailed", path.string());
  f << "epoch,subepoch,lr,loss,dc_csf,dc_gm,dc_wm,dc_mean,phase\n";
  for (const auto& e : log) {
    f << e.epoch << "," << e.subepoch << "," << e.lr << ",";
    if (std::isnan(e.loss)) f << "";
    else f << e.loss;
    f << "," << e.dc_csf << "," << e.dc_gm << "," << e.dc_wm << "," << e.dc_mean << "," << e.phase
      << "\n";
  }
}

namespace detail {

// Pooled per-class Dice accumulator (training accuracy over a subepoch).
struct DiceAccum {
  std::array<std::int64_t, 4> inter{}, pred{}, ref{};

  void add(const LabelArray& p, const LabelArray& r) {
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      ++pred[p[i]];
      ++ref[r[i]];
      if (p[i] == r[i]) ++inter[p[i]];
    }
  }
  double dc(int cls) const {
    const auto denom = pred[cls] + ref[cls];
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(inter[cls]) / static_cast<double>(denom);
  }
};

inline bool all_finite(const ParamSet<float>& grads) {
  for (const auto& t : grads.values)
    for (float v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

inline double mean_tissue_dc(const Volume& pred, const Volume& ref) {
  double sum = 0;
  for (int cls = 1; cls <= 3; ++cls)
    sum += dice(BinaryMask::from_labels(pred, cls), BinaryMask::from_labels(ref, cls));
  return sum / 3.0;
}

// Run the full regime: epochs x subepochs, fresh samples per subepoch,
// RMSprop updates, per-subepoch training DC, per-epoch validation DC, and
// best/latest checkpointing. Resuming from a checkpoint with the same seed
// continues bit-identically because every RNG stream is derived from
// (seed, epoch, subepoch, batch).
inline TrainResult train(const NetworkSpec& spec, const std::vector<Subject>& train_subjects,
                         const Subject& val_subject, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         const std::optional<Checkpoint>& resume = std::nullopt) {
  NetworkSpec sp = spec;
  sp.dropout_rate = cfg.dropout_rate;
  cfg.validate(sp);
  if (train_subjects.empty())
    fail(ErrorCategory::data_invalid, "EmptyInput", "no training subjects");

  const auto t0 = std::chrono::steady_clock::now();
  const Graph graph = build_graph(sp);

  ParamSet<float> params;
  BnStats<float> bn_stats;
  OptimizerState opt = OptimizerState::zeros_like(graph);
  int start_epoch = 0;
  double best_val = -1.0;
  if (resume) {
    if (resume->spec.serialize() != sp.serialize())
      fail(ErrorCategory::data_invalid, "SpecMismatch", "resume checkpoint architecture differs");
    params = resume->params;
    bn_stats = resume->bn_stats;
    if (resume->optimizer) opt = *resume->optimizer;
    start_epoch = static_cast<int>(resume->epochs_completed);
    best_val = resume->best_val_dc;
  } else {
    params = init_params<float>(graph, cfg.seed);
    bn_stats = init_bn_stats<float>(graph);
  }

  std::vector<PreparedSubject> prepared;
  for (const auto& s : train_subjects) prepared.push_back(prepare_subject(s));

  TrainResult result;
  TapeState<float> tape;
  const int batches = cfg.samples_per_subepoch / cfg.batch_size;

  auto snapshot = [&](int epoch) {
    Checkpoint ck;
    ck.spec = sp;
    ck.params = params;
    ck.bn_stats = bn_stats;
    ck.optimizer = opt;
    ck.epochs_completed = epoch;
    ck.seed = cfg.seed;
    ck.best_val_dc = best_val;
    return ck;
  };

  int nonfinite_streak = 0;
  for (int epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.initial_lr);
    for (int sub = 1; sub <= cfg.subepochs; ++sub) {
      Rng srng = Rng::derive(cfg.seed, (static_cast<std::uint64_t>(epoch) << 20) | static_cast<std::uint64_t>(sub));
      const auto draws = draw_samples(prepared, cfg.samples_per_subepoch, srng,
                                      cfg.balanced_sampling, &result.sampler_fallbacks);
      double loss_sum = 0;
      detail::DiceAccum acc;
      for (int b = 0; b < batches; ++b) {
        const Batch batch = make_batch(prepared, draws, static_cast<std::size_t>(b) * cfg.batch_size,
                                       static_cast<std::size_t>(cfg.batch_size), sp, cfg.train_edge);
        std::map<std::string, const Tensor<float>*> inputs;
        for (int s = 0; s < sp.streams; ++s)
          inputs[sp.streams == 2 ? "mod" + std::to_string(s + 1) : "in"] =
              &batch.stream_inputs[static_cast<std::size_t>(s)];

        const std::uint64_t dropout_seed =
            (static_cast<std::uint64_t>(epoch) << 40) | (static_cast<std::uint64_t>(sub) << 20) |
            static_cast<std::uint64_t>(b);
        const Tensor<float> logits =
            forward(graph, params, bn_stats, inputs, Mode::train, cfg.seed ^ dropout_seed, tape);
        const XentResult<float> xr = softmax_xent(logits, batch.targets);
        loss_sum += xr.loss;
        acc.add(argmax_channels(logits), batch.targets);

        const ParamSet<float> grads = backward(graph, params, tape, xr.grad_logits);
        if (!detail::all_finite(grads)) {
          if (++nonfinite_streak >= 3)
            fail(ErrorCategory::numeric, "NonFiniteGradient", "3 consecutive non-finite gradients");
          continue;  // skip this step
        }
        nonfinite_streak = 0;
        rmsprop_step(params, grads, opt, lr, cfg.rms_decay, cfg.rms_epsilon, cfg.momentum);
      }
      const double dc1 = acc.dc(1), dc2 = acc.dc(2), dc3 = acc.dc(3);
      result.log.push_back({epoch, sub, lr, loss_sum / batches, dc1, dc2, dc3,
                            (dc1 + dc2 + dc3) / 3.0, "train"});
    }

    // validation: full-volume inference
    {
      BnStats<float> infer_stats = bn_stats;
      const Segmentation seg = segment(sp, graph, params, infer_stats, val_subject);
      if (!val_subject.labels)
        fail(ErrorCategory::data_invalid, "MissingLabels", "validation subject has no labels");
      double dcs[4] = {0, 0, 0, 0};
      for (int cls = 1; cls <= 3; ++cls)
        dcs[cls] = dice(BinaryMask::from_labels(seg.labels, cls),
                        BinaryMask::from_labels(*val_subject.labels, cls));
      const double mean_dc = (dcs[1] + dcs[2] + dcs[3]) / 3.0;
      result.log.push_back({epoch, 0, lr, std::nan(""), dcs[1], dcs[2], dcs[3], mean_dc, "val"});

      const bool improved = mean_dc > best_val;
      if (improved) best_val = mean_dc;
      if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        save_checkpoint(*out_dir / "last.ckpt", snapshot(epoch));
        if (improved) save_checkpoint(*out_dir / "best.ckpt", snapshot(epoch));
        write_train_log_csv(*out_dir / "train_log.csv", result.log);
      }
    }
  }

  result.last = snapshot(cfg.epochs);
  result.best = out_dir && std::filesystem::exists(*out_dir / "best.ckpt")
                    ? load_checkpoint(*out_dir / "best.ckpt")
                    : result.last;
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace dv
