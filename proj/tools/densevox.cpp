// densevox: phantom generation, training, segmentation, evaluation,
// gradient checking, and training-log summaries in one executable.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "densevox/gradcheck.hpp"
#include "densevox/infer.hpp"
#include "densevox/metrics.hpp"
#include "densevox/phantom.hpp"
#include "densevox/train.hpp"

namespace fs = std::filesystem;

namespace {

// All output files are written to a temp name and renamed, so a crash never
// leaves a truncated file behind under the final name.
void atomic_write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) dv::fail(dv::ErrorCategory::io, "WriteFailed", tmp.string());
    f << text;
  }
  fs::rename(tmp, path);
}

void atomic_write_rawvol(const fs::path& path, const dv::Volume& v,
                         dv::VoxelDtype dtype = dv::VoxelDtype::f32) {
  const fs::path tmp = path.string() + ".tmp";
  dv::write_rawvol(tmp, v, dtype);
  fs::rename(tmp, path);
}

std::map<std::string, std::string> read_kv_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) dv::fail(dv::ErrorCategory::io, "OpenFailed", path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      dv::fail(dv::ErrorCategory::data_invalid, "MalformedHeader",
               path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string resolved_train_config(const dv::TrainConfig& c, const std::string& arch,
                                  const std::string& train_manifest, const std::string& val_dir) {
  std::ostringstream os;
  os << "arch = " << arch << "\n"
     << "train_manifest = " << train_manifest << "\n"
     << "val_subject = " << val_dir << "\n"
     << "epochs = " << c.epochs << "\n"
     << "subepochs = " << c.subepochs << "\n"
     << "samples_per_subepoch = " << c.samples_per_subepoch << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "initial_lr = " << c.initial_lr << "\n"
     << "momentum = " << c.momentum << "\n"
     << "rms_decay = " << c.rms_decay << "\n"
     << "rms_epsilon = " << c.rms_epsilon << "\n"
     << "train_edge = " << c.train_edge << "\n"
     << "seed = " << c.seed << "\n"
     << "balanced_sampling = " << (c.balanced_sampling ? 1 : 0) << "\n"
     << "dropout_rate = " << c.dropout_rate << "\n";
  return os.str();
}

dv::NetworkSpec arch_spec(const std::string& arch) {
  if (arch == "baseline") return dv::NetworkSpec::standard(dv::Connectivity::dense);
  if (arch == "hyperdense") return dv::NetworkSpec::standard(dv::Connectivity::hyperdense);
  if (arch == "plain") return dv::NetworkSpec::standard(dv::Connectivity::plain);
  dv::fail(dv::ErrorCategory::usage, "UnknownArch", arch);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  int subjects = 5;
  std::int64_t dims = 64;
  std::uint64_t seed = 1;
  double noise = 0.03;
  double bias = 0.0;
};

int cmd_generate_phantom(const GenArgs& a) {
  fs::create_directories(a.out);
  std::vector<std::pair<std::string, std::string>> manifest;
  for (int i = 0; i < a.subjects; ++i) {
    dv::PhantomConfig cfg;
    cfg.dims = {a.dims, a.dims, a.dims};
    cfg.seed = dv::Rng::derive(a.seed, static_cast<std::uint64_t>(i)).next_u64();
    cfg.noise_sigma = {a.noise, a.noise};
    cfg.bias_amplitude = a.bias;
    char name[32];
    std::snprintf(name, sizeof name, "subject_%02d", i);
    const dv::Subject s = dv::generate_phantom(cfg, name);
    dv::save_subject(fs::path(a.out) / name, s);
    manifest.emplace_back(name, name);
  }
  {
    std::ostringstream os;
    for (const auto& [id, dir] : manifest) os << id << "\t" << dir << "\n";
    atomic_write_text(fs::path(a.out) / "manifest.tsv", os.str());
  }
  std::ostringstream cfgtxt;
  cfgtxt << "subjects = " << a.subjects << "\ndims = " << a.dims << "\nseed = " << a.seed
         << "\nnoise = " << a.noise << "\nbias = " << a.bias << "\n";
  atomic_write_text(fs::path(a.out) / "config_resolved.txt", cfgtxt.str());
  std::cout << "wrote " << a.subjects << " subjects to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, arch = "hyperdense", train_manifest, val_dir, out, resume;
  bool arch_given = false;
  // flag overrides; unset means "use config file / default"
  std::optional<int> epochs, subepochs, samples, batch;
  std::optional<double> lr, dropout;
  std::optional<std::uint64_t> seed;
  std::optional<bool> balanced;
};

int cmd_train(const TrainArgs& a) {
  dv::TrainConfig cfg;
  std::string arch = a.arch;
  if (!a.config.empty()) {
    const auto kv = read_kv_config(a.config);
    auto get = [&](const char* k, auto& dst) {
      auto it = kv.find(k);
      if (it == kv.end()) return;
      std::istringstream ss(it->second);
      ss >> dst;
      if (ss.fail()) dv::fail(dv::ErrorCategory::data_invalid, "MalformedHeader", std::string("bad value for ") + k);
    };
    get("epochs", cfg.epochs);
    get("subepochs", cfg.subepochs);
    get("samples_per_subepoch", cfg.samples_per_subepoch);
    get("batch_size", cfg.batch_size);
    get("initial_lr", cfg.initial_lr);
    get("momentum", cfg.momentum);
    get("rms_decay", cfg.rms_decay);
    get("rms_epsilon", cfg.rms_epsilon);
    get("train_edge", cfg.train_edge);
    get("seed", cfg.seed);
    get("dropout_rate", cfg.dropout_rate);
    int bal = cfg.balanced_sampling ? 1 : 0;
    get("balanced_sampling", bal);
    cfg.balanced_sampling = bal != 0;
    get("arch", arch);
  }
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.subepochs) cfg.subepochs = *a.subepochs;
  if (a.samples) cfg.samples_per_subepoch = *a.samples;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.lr) cfg.initial_lr = *a.lr;
  if (a.dropout) cfg.dropout_rate = *a.dropout;
  if (a.seed) cfg.seed = *a.seed;
  if (a.balanced) cfg.balanced_sampling = *a.balanced;
  if (a.arch_given || a.config.empty()) arch = a.arch;

  const dv::NetworkSpec spec = arch_spec(arch);
  const auto subjects = dv::load_manifest_subjects(a.train_manifest);
  const dv::Subject val = dv::load_subject(a.val_dir, fs::path(a.val_dir).filename().string());

  fs::create_directories(a.out);
  atomic_write_text(fs::path(a.out) / "config_resolved.txt",
                    resolved_train_config(cfg, arch, a.train_manifest, a.val_dir));

  std::optional<dv::Checkpoint> resume;
  if (!a.resume.empty()) resume = dv::load_checkpoint(a.resume);

  const dv::TrainResult res = dv::train(spec, subjects, val, cfg, fs::path(a.out), resume);
  std::cout << "trained " << cfg.epochs << " epochs in " << res.wall_seconds << " s; best val DC "
            << res.best.best_val_dc << "\n";
  return 0;
}

struct SegArgs {
  std::string checkpoint, subject_dir, out, id;
  bool probs = false;
};

int cmd_segment(const SegArgs& a) {
  const dv::Checkpoint ck = dv::load_checkpoint(a.checkpoint);
  const std::string id = a.id.empty() ? fs::path(a.subject_dir).filename().string() : a.id;
  const dv::Subject subject = dv::load_subject(a.subject_dir, id);
  const dv::Segmentation seg = dv::segment(ck, subject);
  fs::create_directories(a.out);
  atomic_write_rawvol(fs::path(a.out) / "labels.rawvol", seg.labels, dv::VoxelDtype::u8);
  if (a.probs)
    for (std::size_t c = 0; c < seg.class_probs.size(); ++c)
      atomic_write_rawvol(fs::path(a.out) / ("prob_class" + std::to_string(c) + ".rawvol"),
                          seg.class_probs[c]);
  std::cout << "wrote " << (fs::path(a.out) / "labels.rawvol").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string pred, ref, out, id = "subject";
  double spacing = 0;  // 0 = keep the reference volume's spacing
  bool all_variants = false;
};

int cmd_evaluate(const EvalArgs& a) {
  dv::Volume pred = dv::read_rawvol(a.pred);
  dv::Volume ref = dv::read_rawvol(a.ref);
  if (a.spacing > 0) pred.spacing = ref.spacing = {a.spacing, a.spacing, a.spacing};
  else pred.spacing = ref.spacing;

  std::vector<dv::MhdMode> modes{dv::MhdMode::percentile95};
  if (a.all_variants) modes.push_back(dv::MhdMode::dubuisson_jain);

  std::ostringstream csv;
  csv << "subject,class,dc,mhd,asd,mhd_variant\n";
  std::printf("%-10s %-5s %8s %8s %8s  %s\n", "subject", "class", "DC", "MHD", "ASD", "variant");
  for (const auto mode : modes) {
    const char* variant = mode == dv::MhdMode::percentile95 ? "percentile95" : "dubuisson_jain";
    const dv::MetricsReport rep = dv::evaluate_labels(pred, ref, mode, a.id);
    for (int cls = 1; cls <= 3; ++cls) {
      const dv::ClassMetrics& m = rep.per_class[static_cast<std::size_t>(cls - 1)];
      csv << a.id << "," << dv::tissue_name(cls) << "," << m.dc << ","
          << (m.mhd ? std::to_string(*m.mhd) : "") << "," << (m.asd ? std::to_string(*m.asd) : "")
          << "," << variant << "\n";
      std::printf("%-10s %-5s %8.4f ", a.id.c_str(), dv::tissue_name(cls), m.dc);
      if (m.mhd) std::printf("%8.4f ", *m.mhd); else std::printf("%8s ", "n/a");
      if (m.asd) std::printf("%8.4f", *m.asd); else std::printf("%8s", "n/a");
      std::printf("  %s\n", variant);
    }
  }
  if (!a.out.empty()) atomic_write_text(a.out, csv.str());
  return 0;
}

int cmd_gradcheck(const std::string& op, std::uint64_t seed) {
  const auto reports = dv::run_gradcheck(op, seed);
  bool all_pass = true;
  for (const auto& r : reports) {
    std::printf("%s op=%s max_rel_err=%.3e coords=%lld skipped=%lld\n", r.pass ? "PASS" : "FAIL",
                r.op.c_str(), r.max_rel_err, static_cast<long long>(r.coords),
                static_cast<long long>(r.skipped));
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) dv::fail(dv::ErrorCategory::numeric, "GradCheckFailed", "see report above");
  return 0;
}

int cmd_summarize(const std::string& log_path, const std::string& out_csv) {
  std::ifstream f(log_path);
  if (!f) dv::fail(dv::ErrorCategory::io, "OpenFailed", log_path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("epoch,subepoch,lr,loss", 0) != 0)
    dv::fail(dv::ErrorCategory::data_invalid, "MalformedHeader", "unexpected log header");

  struct EpochAgg {
    double loss = 0, train_dc = 0;
    int n = 0;
    double lr = 0;
    std::optional<double> val_dc;
  };
  std::map<int, EpochAgg> epochs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    if (cols.size() < 9) dv::fail(dv::ErrorCategory::data_invalid, "MalformedHeader", "short log row");
    const int epoch = std::stoi(cols[0]);
    EpochAgg& agg = epochs[epoch];
    agg.lr = std::stod(cols[2]);
    if (cols[8] == "val") {
      agg.val_dc = std::stod(cols[7]);
    } else {
      agg.loss += std::stod(cols[3]);
      agg.train_dc += std::stod(cols[7]);
      ++agg.n;
    }
  }

  std::ostringstream csv;
  csv << "epoch,lr,train_loss,train_dc,val_dc\n";
  std::printf("%5s %10s %10s %9s %8s\n", "epoch", "lr", "loss", "train_dc", "val_dc");
  for (const auto& [epoch, agg] : epochs) {
    const double loss = agg.n ? agg.loss / agg.n : 0;
    const double tdc = agg.n ? agg.train_dc / agg.n : 0;
    csv << epoch << "," << agg.lr << "," << loss << "," << tdc << ","
        << (agg.val_dc ? std::to_string(*agg.val_dc) : "") << "\n";
    std::printf("%5d %10.6f %10.5f %9.4f ", epoch, agg.lr, loss, tdc);
    if (agg.val_dc) std::printf("%8.4f\n", *agg.val_dc); else std::printf("%8s\n", "n/a");
  }
  if (!out_csv.empty()) atomic_write_text(out_csv, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric dense-network segmentation pipeline"};
  app.require_subcommand(1);
  int threads = 1;
  if (const char* env = std::getenv("HD3D_THREADS")) threads = std::atoi(env);
  app.add_option("--threads", threads, "worker thread cap (compute is single-threaded)");

  GenArgs gen;
  auto* sc_gen = app.add_subcommand("generate-phantom", "write synthetic labeled subjects + manifest");
  sc_gen->add_option("--out", gen.out, "output directory")->required();
  sc_gen->add_option("--subjects", gen.subjects, "number of subjects");
  sc_gen->add_option("--dims", gen.dims, "cubic volume edge");
  sc_gen->add_option("--seed", gen.seed, "master seed");
  sc_gen->add_option("--noise", gen.noise, "gaussian noise sigma");
  sc_gen->add_option("--bias", gen.bias, "multiplicative bias field amplitude");

  TrainArgs tr;
  auto* sc_tr = app.add_subcommand("train", "train a network on a subject manifest");
  sc_tr->add_option("--config", tr.config, "key = value config file (flags override)");
  sc_tr->add_option("--arch", tr.arch, "baseline | hyperdense | plain");
  sc_tr->add_option("--train", tr.train_manifest, "training manifest")->required();
  sc_tr->add_option("--val", tr.val_dir, "validation subject directory")->required();
  sc_tr->add_option("--out", tr.out, "run output directory")->required();
  sc_tr->add_option("--resume", tr.resume, "checkpoint to resume from");
  sc_tr->add_option("--epochs", tr.epochs, "epoch count");
  sc_tr->add_option("--subepochs", tr.subepochs, "subepochs per epoch");
  sc_tr->add_option("--samples", tr.samples, "samples per subepoch");
  sc_tr->add_option("--batch", tr.batch, "batch size");
  sc_tr->add_option("--lr", tr.lr, "initial learning rate");
  sc_tr->add_option("--dropout", tr.dropout, "dropout rate for 1x1x1 stages");
  sc_tr->add_option("--seed", tr.seed, "training seed");
  sc_tr->add_option("--balanced", tr.balanced, "class-balanced sampling (1/0)");

  SegArgs seg;
  auto* sc_seg = app.add_subcommand("segment", "tiled full-volume inference");
  sc_seg->add_option("--checkpoint", seg.checkpoint, "trained checkpoint")->required();
  sc_seg->add_option("--subject", seg.subject_dir, "subject directory")->required();
  sc_seg->add_option("--out", seg.out, "output directory")->required();
  sc_seg->add_option("--id", seg.id, "subject id for reports");
  sc_seg->add_flag("--probs", seg.probs, "also write per-class probability volumes");

  EvalArgs ev;
  auto* sc_ev = app.add_subcommand("evaluate", "DC / MHD / ASD against a reference labeling");
  sc_ev->add_option("--pred", ev.pred, "predicted label volume")->required();
  sc_ev->add_option("--ref", ev.ref, "reference label volume")->required();
  sc_ev->add_option("--spacing", ev.spacing, "isotropic voxel spacing in mm (overrides headers)");
  sc_ev->add_option("--out", ev.out, "also write a CSV report here");
  sc_ev->add_option("--id", ev.id, "subject id for the report");
  sc_ev->add_flag("--all-variants", ev.all_variants, "report both MHD variants");

  std::string gc_op = "all";
  std::uint64_t gc_seed = 1;
  auto* sc_gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  sc_gc->add_option("--op", gc_op, "primitive name, 'composite', or 'all'");
  sc_gc->add_option("--seed", gc_seed, "check seed");

  std::string sum_log, sum_out;
  auto* sc_sum = app.add_subcommand("summarize", "per-epoch table from a training log");
  sc_sum->add_option("--log", sum_log, "train_log.csv path")->required();
  sc_sum->add_option("--out", sum_out, "plot-data CSV output path");

  try {
    app.parse(argc, argv);
    (void)threads;  // compute paths are deterministic single-thread
    if (*sc_gen) return cmd_generate_phantom(gen);
    if (*sc_tr) {
      tr.arch_given = sc_tr->count("--arch") > 0;
      return cmd_train(tr);
    }
    if (*sc_seg) return cmd_segment(seg);
    if (*sc_ev) return cmd_evaluate(ev);
    if (*sc_gc) return cmd_gradcheck(gc_op, gc_seed);
    if (*sc_sum) return cmd_summarize(sum_log, sum_out);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const dv::Error& e) {
    std::cerr << "error: category=" << static_cast<int>(e.category()) << " code=" << e.code()
              << " " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: category=4 code=Unhandled " << e.what() << "\n";
    return 4;
  }
  return 0;
}
