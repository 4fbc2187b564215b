// HDMba command-line toolkit: synthesize paired haze datasets, train the
// dehazing network, run inference, evaluate metrics, count parameters, and
// export spectra / band-wise curves as CSV.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
// 4 numeric failure (training divergence). HDMBA_DETERMINISTIC=0 permits
// non-bitwise-reproducible inference fast paths; any other value (or unset)
// keeps every run bit-exact.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "hdmba/checkpoint.hpp"
#include "hdmba/haze_sim.hpp"
#include "hdmba/metrics.hpp"
#include "hdmba/trainer.hpp"

namespace fs = std::filesystem;
using hdmba::NoGradGuard;
using hdmba::Tensor;
namespace haze = hdmba::haze;
namespace hsc = hdmba::hsc;
namespace metrics = hdmba::metrics;
namespace net = hdmba::net;
namespace train = hdmba::train;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw hdmba::IoError("cannot write " + path);
  out << text;
}

// Resolved configuration echo dropped into every run directory.
void echo_config(CLI::App* sub, const std::string& dir) {
  std::string text = "# resolved configuration (hdmba " + sub->get_name() + ")\n" +
                     "# deterministic_mode=" + (hdmba::deterministic_mode() ? "1" : "0") + "\n" +
                     sub->config_to_str(true, false);
  write_text((fs::path(dir) / "resolved_config.cfg").string(), text);
}

std::string peek_checkpoint_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw hdmba::IoError("checkpoint: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw hdmba::IoError("checkpoint: missing manifest in " + path);
  auto j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded() || j.value("magic", "") != net::kCheckpointMagic)
    throw hdmba::IoError("checkpoint: " + path + " is not an HDMba checkpoint");
  return j.value("dtype", "f32");
}

// Whole-image forward, or non-overlapping tiles when tile > 0. Window-size
// padding inside the network handles arbitrary tile extents.
template <typename T>
hsc::HsiCube dehaze_cube(const net::DehazeModel<T>& model, const hsc::HsiCube& in, int64_t tile) {
  NoGradGuard ng;
  if (in.bands != model.config.bands)
    throw hdmba::ShapeError("dehaze: cube has " + std::to_string(in.bands) +
                            " bands, checkpoint expects " + std::to_string(model.config.bands));
  if (tile <= 0 || (tile >= in.width && tile >= in.height)) {
    auto y = net::hdmba_forward(hsc::to_tensor<T>(in), model);
    return hsc::from_tensor(y, in.wavelengths_nm);
  }
  hsc::HsiCube out = in;
  for (int64_t y0 = 0; y0 < in.height; y0 += tile)
    for (int64_t x0 = 0; x0 < in.width; x0 += tile) {
      const int64_t w = std::min(tile, in.width - x0);
      const int64_t h = std::min(tile, in.height - y0);
      auto yt = net::hdmba_forward(hsc::to_tensor_crop<T>(in, x0, y0, w, h), model);
      const auto& v = yt.values();
      for (int64_t b = 0; b < in.bands; ++b)
        for (int64_t yy = 0; yy < h; ++yy)
          for (int64_t xx = 0; xx < w; ++xx)
            out.at(x0 + xx, y0 + yy, b) = static_cast<float>(v[(yy * w + xx) * in.bands + b]);
    }
  return out;
}

struct ModelFlags {
  int64_t channels = 64, rdm = 4, dml = 4, window = 8, state_size = 16, expansion = 2,
          dt_rank = 0, mlp_ratio = 2;
  std::string ablate;
  bool bidirectional = false, tail_concat = false;
  double theta1 = 1.0, theta2 = 0.1;

  void add_to(CLI::App* sub) {
    sub->add_option("--channels", channels, "feature width C");
    sub->add_option("--rdm", rdm, "RDM block count I");
    sub->add_option("--dml", dml, "DMLs per RDM block K");
    sub->add_option("--window", window, "WSSM window size M");
    sub->add_option("--state-size", state_size, "SSM state size N");
    sub->add_option("--expansion", expansion, "Mamba channel expansion");
    sub->add_option("--dt-rank", dt_rank, "delta projection rank (0 = auto)");
    sub->add_option("--mlp-ratio", mlp_ratio, "MLP hidden ratio");
    sub->add_option("--ablate", ablate,
                    "comma list of no-ssm,no-dconv,no-gate,no-mlp");
    sub->add_flag("--bidirectional", bidirectional, "scan both directions per window");
    sub->add_flag("--tail-concat", tail_concat, "concat shallow features instead of adding");
    sub->add_option("--theta1", theta1, "MSE loss weight");
    sub->add_option("--theta2", theta2, "L1 loss weight");
  }

  net::ModelConfig to_config(int64_t bands) const {
    net::ModelConfig c;
    c.bands = bands;
    c.channels = channels;
    c.rdm_count = rdm;
    c.dml_per_rdm = dml;
    c.window = window;
    c.state_size = state_size;
    c.expansion = expansion;
    c.dt_rank = dt_rank;
    c.mlp_ratio = mlp_ratio;
    c.bidirectional = bidirectional;
    c.tail_concat = tail_concat;
    c.theta1 = theta1;
    c.theta2 = theta2;
    std::stringstream ss(ablate);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      if (item == "no-ssm")
        c.use_ssm = false;
      else if (item == "no-dconv")
        c.use_dconv = false;
      else if (item == "no-gate")
        c.use_gate = false;
      else if (item == "no-mlp")
        c.use_mlp = false;
      else
        throw hdmba::ValueError("unknown ablation flag: " + item);
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

int cmd_synthesize(CLI::App* sub) {
  auto recipe = std::make_shared<haze::DatasetRecipe>();
  auto abundance_count = std::make_shared<int64_t>(5);
  auto abundance_values = std::make_shared<std::vector<double>>();
  auto size = std::make_shared<int64_t>(0);
  sub->add_option("--out", recipe->out_dir, "output directory")->required();
  sub->add_option("--scenes", recipe->scenes, "clean scene count");
  sub->add_option("--thickness-levels", recipe->thickness_levels, "haze thickness levels");
  sub->add_option("--abundances", *abundance_count, "haze abundance count");
  sub->add_option("--abundance-values", *abundance_values, "explicit abundance values");
  sub->add_option("--width", recipe->width, "scene width");
  sub->add_option("--height", recipe->height, "scene height");
  sub->add_option("--size", *size, "square scene size (sets width and height)");
  sub->add_option("--bands", recipe->bands, "spectral band count");
  sub->add_option("--seed", recipe->seed, "master seed");
  sub->add_option("--gamma", recipe->gamma, "spectral decay exponent");
  sub->add_option("--wl-min", recipe->wavelength_lo, "shortest wavelength (nm)");
  sub->add_option("--wl-max", recipe->wavelength_hi, "longest wavelength (nm)");
  sub->callback([=]() {
    if (*size > 0) recipe->width = recipe->height = *size;
    recipe->abundances = abundance_values->empty() ? haze::default_abundances(*abundance_count)
                                                   : *abundance_values;
    auto manifest = haze::build_dataset(*recipe);
    echo_config(sub, recipe->out_dir);
    std::cout << "wrote " << manifest.pairs.size() << " pairs ("
              << manifest.split_pairs("train").size() << " train / "
              << manifest.split_pairs("test").size() << " test) under " << recipe->out_dir << "\n"
              << "manifest: " << (fs::path(recipe->out_dir) / "manifest.json").string() << "\n";
  });
  return 0;
}

int cmd_train(CLI::App* sub) {
  auto flags = std::make_shared<ModelFlags>();
  auto cfg = std::make_shared<train::TrainConfig>();
  auto data_path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto resume = std::make_shared<std::string>();
  auto dtype = std::make_shared<std::string>("f32");
  auto model_seed = std::make_shared<uint64_t>(0);
  sub->add_option("--data", *data_path, "dataset manifest.json")->required();
  sub->add_option("--out", *out_dir, "run directory")->required();
  flags->add_to(sub);
  sub->add_option("--iterations", cfg->iterations, "optimizer steps");
  sub->add_option("--batch", cfg->batch, "crops per step");
  sub->add_option("--lr", cfg->lr0, "initial learning rate");
  sub->add_option("--lr-min", cfg->lr_min, "cosine floor");
  sub->add_option("--beta1", cfg->beta1, "Adam beta1");
  sub->add_option("--beta2", cfg->beta2, "Adam beta2");
  sub->add_option("--eps", cfg->eps, "Adam epsilon");
  sub->add_option("--crop", cfg->crop_train, "training crop size");
  sub->add_option("--seed", cfg->seed, "sampling seed");
  sub->add_option("--model-seed", *model_seed, "weight init seed");
  sub->add_option("--checkpoint-every", cfg->checkpoint_every, "checkpoint period (0 = off)");
  sub->add_option("--grad-clip", cfg->grad_clip, "global-norm gradient clip (0 = off)");
  sub->add_option("--resume", *resume, "training-state checkpoint to resume from");
  sub->add_option("--dtype", *dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  sub->callback([=]() {
    cfg->theta1 = flags->theta1;
    cfg->theta2 = flags->theta2;
    auto manifest = haze::read_manifest(*data_path);
    auto data = train::Dataset::load(manifest);
    if (data.train.empty()) throw hdmba::ValueError("train: dataset has no training pairs");
    auto run = [&](auto tag) {
      using T = decltype(tag);
      auto model = net::build_model<T>(flags->to_config(manifest.recipe.bands), *model_seed);
      auto result = train::train(model, data, *cfg, *out_dir, *resume);
      echo_config(sub, *out_dir);
      std::cout << "trained " << result.curve.size() << " iterations; final loss "
                << (result.curve.empty() ? 0.0 : result.curve.back().loss) << "\n"
                << "checkpoint: " << result.final_checkpoint << "\n";
    };
    if (*dtype == "f64")
      run(double{});
    else
      run(float{});
  });
  return 0;
}

int cmd_dehaze(CLI::App* sub) {
  auto ckpt = std::make_shared<std::string>();
  auto input = std::make_shared<std::string>();
  auto output = std::make_shared<std::string>();
  auto tile = std::make_shared<int64_t>(0);
  sub->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  sub->add_option("--input", *input, "hazy cube (.hsc)")->required();
  sub->add_option("--output", *output, "dehazed cube path")->required();
  sub->add_option("--tile", *tile, "process in NxN tiles (0 = whole image)");
  sub->callback([=]() {
    auto cube = hsc::read_hsc(*input);
    auto run = [&](auto tag) {
      using T = decltype(tag);
      auto model = net::model_from_checkpoint(net::load_checkpoint<T>(*ckpt));
      hsc::write_hsc(*output, dehaze_cube(model, cube, *tile));
    };
    if (peek_checkpoint_dtype(*ckpt) == "f64")
      run(double{});
    else
      run(float{});
    std::cout << "dehazed " << *input << " -> " << *output << "\n";
  });
  return 0;
}

int cmd_evaluate(CLI::App* sub) {
  auto data_path = std::make_shared<std::string>();
  auto ckpt = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto split = std::make_shared<std::string>("test");
  auto tile = std::make_shared<int64_t>(0);
  sub->add_option("--data", *data_path, "dataset manifest.json")->required();
  sub->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  sub->add_option("--out", *out_dir, "report directory")->required();
  sub->add_option("--split", *split, "train | test | all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  sub->add_option("--tile", *tile, "inference tile size (0 = whole image)");
  sub->callback([=]() {
    auto manifest = haze::read_manifest(*data_path);
    std::vector<haze::PairRecord> pairs;
    for (const auto& p : manifest.pairs)
      if (*split == "all" || p.split == *split) pairs.push_back(p);
    if (pairs.empty()) throw hdmba::ValueError("evaluate: no pairs in split " + *split);
    fs::create_directories(*out_dir);

    const bool f64 = peek_checkpoint_dtype(*ckpt) == "f64";
    net::DehazeModel<float> model_f;
    net::DehazeModel<double> model_d;
    if (f64)
      model_d = net::model_from_checkpoint(net::load_checkpoint<double>(*ckpt));
    else
      model_f = net::model_from_checkpoint(net::load_checkpoint<float>(*ckpt));

    metrics::MetricConfig mcfg;
    double agg_ssim = 0, agg_psnr = 0, agg_uqi = 0, agg_sam = 0, agg_ag = 0;
    double base_ssim = 0, base_psnr = 0, base_uqi = 0, base_sam = 0, base_ag = 0;
    int64_t finite_psnr = 0;
    std::vector<double> band_ssim, band_mse;  // dehazed-vs-clean, pooled over pairs
    std::vector<double> band_wavelengths;
    nlohmann::ordered_json per_pair = nlohmann::ordered_json::array();
    for (size_t i = 0; i < pairs.size(); ++i) {
      auto clean = hsc::read_hsc((fs::path(manifest.base_dir) / pairs[i].clean_path).string());
      auto hazy = hsc::read_hsc((fs::path(manifest.base_dir) / pairs[i].hazy_path).string());
      auto dehazed = f64 ? dehaze_cube(model_d, hazy, *tile) : dehaze_cube(model_f, hazy, *tile);
      auto rep = metrics::evaluate_pair(dehazed, clean, mcfg);
      auto base = metrics::evaluate_pair(hazy, clean, mcfg);
      if (band_ssim.empty()) {
        band_ssim.assign(rep.bands.size(), 0.0);
        band_mse.assign(rep.bands.size(), 0.0);
        for (const auto& row : rep.bands) band_wavelengths.push_back(row.wavelength_nm);
      }
      for (size_t b = 0; b < rep.bands.size(); ++b) {
        band_ssim[b] += rep.bands[b].ssim;
        band_mse[b] += rep.bands[b].psnr_identical
                           ? 0.0
                           : mcfg.peak * mcfg.peak * std::pow(10.0, -rep.bands[b].psnr_db / 10.0);
      }
      agg_ssim += rep.ssim;
      agg_uqi += rep.uqi;
      agg_sam += rep.sam_rad;
      agg_ag += rep.ag_result;
      base_ssim += base.ssim;
      base_uqi += base.uqi;
      base_sam += base.sam_rad;
      base_ag += base.ag_result;
      if (!rep.psnr_identical && !base.psnr_identical) {
        agg_psnr += rep.psnr_db;
        base_psnr += base.psnr_db;
        ++finite_psnr;
      }
      nlohmann::ordered_json e;
      e["hazy"] = pairs[i].hazy_path;
      e["dehazed"] = metrics::report_to_json(rep);
      e["hazy_baseline"] = metrics::report_to_json(base);
      per_pair.push_back(std::move(e));
    }
    const double n = double(pairs.size());
    nlohmann::ordered_json summary;
    summary["pairs"] = pairs.size();
    summary["split"] = *split;
    summary["dehazed_mean"] = {{"ssim", agg_ssim / n},
                               {"psnr_db", finite_psnr ? agg_psnr / double(finite_psnr) : 0.0},
                               {"uqi", agg_uqi / n},
                               {"sam_rad", agg_sam / n},
                               {"avg_gradient", agg_ag / n}};
    summary["hazy_mean"] = {{"ssim", base_ssim / n},
                            {"psnr_db", finite_psnr ? base_psnr / double(finite_psnr) : 0.0},
                            {"uqi", base_uqi / n},
                            {"sam_rad", base_sam / n},
                            {"avg_gradient", base_ag / n}};
    summary["run_config"] = sub->config_to_str(true, false);
    summary["pairs_detail"] = std::move(per_pair);
    write_text((fs::path(*out_dir) / "report.json").string(), summary.dump(2) + "\n");

    // mean band-wise curve of the dehazed results (PSNR from pooled MSE)
    std::vector<metrics::BandRow> mean_rows(band_ssim.size());
    for (size_t b = 0; b < band_ssim.size(); ++b) {
      mean_rows[b].wavelength_nm = band_wavelengths[b];
      mean_rows[b].ssim = band_ssim[b] / n;
      const double mse = band_mse[b] / n;
      mean_rows[b].psnr_identical = mse == 0.0;
      mean_rows[b].psnr_db = mse == 0.0 ? std::numeric_limits<double>::infinity()
                                        : 10.0 * std::log10(mcfg.peak * mcfg.peak / mse);
    }
    metrics::write_bandcurve_csv((fs::path(*out_dir) / "bandcurve_mean.csv").string(), mean_rows);
    echo_config(sub, *out_dir);
    std::cout << "pairs " << pairs.size() << " (" << *split << ")\n"
              << "dehazed: ssim " << agg_ssim / n << "  psnr "
              << (finite_psnr ? agg_psnr / double(finite_psnr) : 0.0) << " dB  uqi "
              << agg_uqi / n << "  sam " << agg_sam / n << "  ag " << agg_ag / n << "\n"
              << "hazy:    ssim " << base_ssim / n << "  psnr "
              << (finite_psnr ? base_psnr / double(finite_psnr) : 0.0) << " dB  uqi "
              << base_uqi / n << "  sam " << base_sam / n << "  ag " << base_ag / n << "\n"
              << "report: " << (fs::path(*out_dir) / "report.json").string() << "\n";
  });
  return 0;
}

int cmd_params(CLI::App* sub) {
  auto flags = std::make_shared<ModelFlags>();
  auto ckpt = std::make_shared<std::string>();
  auto bands = std::make_shared<int64_t>(305);
  auto sweep = std::make_shared<std::string>();
  auto target = std::make_shared<double>(4.60e6);
  sub->add_option("--checkpoint", *ckpt, "count parameters of an existing checkpoint");
  sub->add_option("--bands", *bands, "input band count");
  flags->add_to(sub);
  sub->add_option("--sweep-channels", *sweep, "lo:hi:step sweep reporting |count - target|");
  sub->add_option("--target", *target, "sweep target parameter count");
  sub->callback([=]() {
    auto report = [](const net::ParameterCount& pc) {
      for (const auto& [group, count] : pc.groups)
        std::cout << "  " << group << "  " << count << "\n";
      std::cout << "total " << pc.total << " (" << double(pc.total) / 1e6 << " M)\n";
    };
    if (!ckpt->empty()) {
      auto loaded = net::load_checkpoint<float>(*ckpt);
      auto model = net::model_from_checkpoint(loaded);
      report(net::parameter_count(model));
      return;
    }
    if (!sweep->empty()) {
      int64_t lo, hi, step;
      if (std::sscanf(sweep->c_str(), "%ld:%ld:%ld", &lo, &hi, &step) != 3 || step < 1 ||
          lo > hi)
        throw hdmba::ValueError("params: --sweep-channels expects lo:hi:step");
      int64_t best_c = lo;
      double best_gap = 1e300;
      std::cout << "channels,total,gap_to_target\n";
      for (int64_t c = lo; c <= hi; c += step) {
        auto f = *flags;
        f.channels = c;
        auto pc = net::parameter_count(net::build_model<float>(f.to_config(*bands)));
        const double gap = std::fabs(double(pc.total) - *target);
        std::cout << c << "," << pc.total << "," << gap << "\n";
        if (gap < best_gap) {
          best_gap = gap;
          best_c = c;
        }
      }
      std::cout << "nearest to " << *target << ": channels=" << best_c << "\n";
      return;
    }
    report(net::parameter_count(net::build_model<float>(flags->to_config(*bands))));
  });
  return 0;
}

int cmd_spectra(CLI::App* sub) {
  auto cubes = std::make_shared<std::vector<std::string>>();
  auto x = std::make_shared<int64_t>(0);
  auto y = std::make_shared<int64_t>(0);
  auto out = std::make_shared<std::string>();
  sub->add_option("--cube", *cubes, "cube path (repeatable)")->required();
  sub->add_option("--x", *x, "pixel x")->required();
  sub->add_option("--y", *y, "pixel y")->required();
  sub->add_option("--out", *out, "output CSV")->required();
  sub->callback([=]() {
    std::vector<hsc::HsiCube> loaded;
    for (const auto& p : *cubes) loaded.push_back(hsc::read_hsc(p));
    for (const auto& c : loaded)
      if (c.wavelengths_nm != loaded[0].wavelengths_nm)
        throw hdmba::ValueError("spectra: cubes have different wavelength grids");
    std::ofstream csv(*out, std::ios::trunc);
    if (!csv) throw hdmba::IoError("spectra: cannot write " + *out);
    csv << "wavelength_nm";
    for (const auto& p : *cubes) csv << ',' << fs::path(p).stem().string();
    csv << '\n';
    std::vector<std::vector<std::pair<double, double>>> spectra;
    for (const auto& c : loaded) spectra.push_back(metrics::extract_spectrum(c, *x, *y));
    for (size_t b = 0; b < spectra[0].size(); ++b) {
      csv << spectra[0][b].first;
      for (const auto& s : spectra) csv << ',' << s[b].second;
      csv << '\n';
    }
    if (!csv) throw hdmba::IoError("spectra: write failed for " + *out);
    std::cout << "wrote " << spectra[0].size() << " rows to " << *out << "\n";
  });
  return 0;
}

int cmd_bandcurve(CLI::App* sub) {
  auto hazy_path = std::make_shared<std::string>();
  auto clean_path = std::make_shared<std::string>();
  auto ckpt = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto tile = std::make_shared<int64_t>(0);
  sub->add_option("--hazy", *hazy_path, "hazy cube")->required();
  sub->add_option("--clean", *clean_path, "clean reference cube")->required();
  sub->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  sub->add_option("--out", *out, "output CSV (dehazed vs clean)")->required();
  sub->add_option("--tile", *tile, "inference tile size (0 = whole image)");
  sub->callback([=]() {
    auto hazy = hsc::read_hsc(*hazy_path);
    auto clean = hsc::read_hsc(*clean_path);
    hsc::HsiCube dehazed;
    if (peek_checkpoint_dtype(*ckpt) == "f64")
      dehazed = dehaze_cube(net::model_from_checkpoint(net::load_checkpoint<double>(*ckpt)), hazy,
                            *tile);
    else
      dehazed = dehaze_cube(net::model_from_checkpoint(net::load_checkpoint<float>(*ckpt)), hazy,
                            *tile);
    metrics::write_bandcurve_csv(*out, metrics::bandwise_curves(dehazed, clean));
    const auto baseline = fs::path(*out).parent_path() /
                          (fs::path(*out).stem().string() + "_hazy_baseline.csv");
    metrics::write_bandcurve_csv(baseline.string(), metrics::bandwise_curves(hazy, clean));
    std::cout << "wrote " << *out << " and " << baseline.string() << "\n";
  });
  return 0;
}

// Flat key=value config files ('#' comments allowed). Keys are subcommand
// option names without the leading dashes; values given explicitly on the
// command line win over the file.
std::vector<std::string> merge_config_args(CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string sub_name, cfg_path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (sub_name.empty() && !args[i].empty() && args[i][0] != '-' &&
        app.get_subcommand_no_throw(args[i]) != nullptr) {
      sub_name = args[i];
      continue;
    }
    if (args[i] == "--config" && i + 1 < args.size())
      cfg_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      cfg_path = args[i].substr(9);
  }
  if (sub_name.empty() || cfg_path.empty()) return args;
  CLI::App* sub = app.get_subcommand_no_throw(sub_name);

  std::ifstream in(cfg_path);
  if (!in) throw hdmba::IoError("config: cannot open " + cfg_path);
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw hdmba::ValueError("config: expected key=value, got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "config") continue;
    if (sub->get_option_no_throw("--" + key) == nullptr)
      throw hdmba::ValueError("config: unknown key '" + key + "' for subcommand " + sub_name);
    bool given = false;
    for (const auto& a : args)
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) given = true;
    if (!given) args.push_back("--" + key + "=" + value);
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HDMba hyperspectral dehazing toolkit"};
  app.require_subcommand(1);

  auto config_opt = std::make_shared<std::string>();
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", *config_opt,
                    "flat key=value config file; explicit flags win");
  };

  auto* synth = app.add_subcommand("synthesize", "generate a paired hazy/clean dataset");
  add_config(synth);
  cmd_synthesize(synth);
  auto* tr = app.add_subcommand("train", "train the dehazing network");
  add_config(tr);
  cmd_train(tr);
  auto* dh = app.add_subcommand("dehaze", "run inference on a cube");
  add_config(dh);
  cmd_dehaze(dh);
  auto* ev = app.add_subcommand("evaluate", "metric report over dataset pairs");
  add_config(ev);
  cmd_evaluate(ev);
  auto* pa = app.add_subcommand("params", "parameter counts per block");
  add_config(pa);
  cmd_params(pa);
  auto* sp = app.add_subcommand("spectra", "extract pixel spectra as CSV");
  add_config(sp);
  cmd_spectra(sp);
  auto* bc = app.add_subcommand("bandcurve", "band-wise SSIM/PSNR curves as CSV");
  add_config(bc);
  cmd_bandcurve(bc);

  try {
    auto args = merge_config_args(app, argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const hdmba::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const hdmba::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const hdmba::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
