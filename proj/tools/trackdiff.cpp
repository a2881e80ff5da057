// trackdiff command line: gen, train, sample, eval, gradcheck.
//
// Exit codes: 0 success, 1 a check failed (eval --self-check, gradcheck),
// 2 configuration or validation error, 3 numeric failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "trackdiff/trackdiff.hpp"

namespace fs = std::filesystem;
using namespace trackdiff;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr double kSelfCheckMiou = 0.95;

struct Dataset {
  std::vector<std::string> names;
  std::vector<ClipAnnotation> clips;
  std::vector<FrameBuffer> frames;
};

// Layout shared by gen and sample: <dir>/index.txt lists clip directories,
// each holding annotations.json and frames/ (PPM sequence plus index).
void write_clip(const fs::path& dir, const ClipAnnotation& clip, const FrameBuffer& fb) {
  fs::create_directories(dir);
  write_text_file((dir / "annotations.json").string(), serialize_annotations(clip));
  write_frame_sequence(dir / "frames", fb);
}

std::vector<std::string> read_index(const fs::path& dir) {
  if (!fs::exists(dir / "index.txt")) throw ConfigError("'" + dir.string() + "' has no index.txt");
  std::istringstream in(read_text_file((dir / "index.txt").string()));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

Dataset load_dataset(const fs::path& dir, bool with_frames, std::size_t k_max) {
  Dataset d;
  for (const auto& name : read_index(dir)) {
    d.names.push_back(name);
    d.clips.push_back(parse_annotations(read_text_file((dir / name / "annotations.json").string()), k_max));
    if (with_frames) d.frames.push_back(read_frame_sequence(dir / name / "frames"));
  }
  return d;
}

int cmd_gen(RunConfig c) {
  if (c.out.empty()) throw ConfigError("gen needs --out");
  SyntheticOptions so;
  so.k_max = c.max_instances;
  so.n_categories = std::min(c.categories, kPaletteSize);
  if (c.instances > c.max_instances) {
    throw CapacityError("--instances " + std::to_string(c.instances) + " exceeds max_instances " +
                        std::to_string(c.max_instances));
  }
  std::ostringstream index;
  for (std::size_t i = 0; i < c.clips; ++i) {
    const std::size_t n = c.instances == 0 ? 0 : 1 + i % c.instances;
    auto sc = gen_synthetic(c.seed * 1000003ULL + i, n, c.frames, c.width, c.height, so);
    char name[32];
    std::snprintf(name, sizeof name, "clip_%03zu", i);
    write_clip(fs::path(c.out) / name, sc.annotation, sc.frames);
    index << name << '\n';
  }
  write_text_file((fs::path(c.out) / "index.txt").string(), index.str());
  write_run_config(c.out, c);
  std::printf("wrote %zu clips to %s\n", c.clips, c.out.c_str());
  return 0;
}

int cmd_train(RunConfig c) {
  if (c.out.empty() || c.data.empty()) throw ConfigError("train needs --data and --out");
  if (c.stage == "video" && c.init.empty() && !c.allow_cold_start) {
    throw ConfigError("video stage needs --init <image checkpoint> (or --allow-cold-start)");
  }
  auto ds = load_dataset(c.data, true, c.max_instances);
  if (ds.clips.empty()) throw ConfigError("dataset '" + c.data + "' is empty");
  std::vector<TrainExample> data;
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    data.push_back({encode_frames(ds.frames[i], c.patch), ds.clips[i]});
    if (data[i].latent.shape() != data[0].latent.shape()) throw ConfigError("clips in '" + c.data + "' differ in extents");
  }
  const auto& z = data[0].latent;
  auto cfg = c.model(z.dim(0), z.dim(1), z.dim(2), z.dim(3));
  auto p = init_denoiser(cfg, c.seed);
  if (!c.init.empty()) {
    auto ck = load_checkpoint(c.init);
    const auto n = load_stage_init(p, ck.params);
    std::fprintf(stderr, "loaded %zu tensors from %s\n", n, c.init.c_str());
  }
  fs::create_directories(c.out);
  write_run_config(c.out, c);
  std::ofstream csv(fs::path(c.out) / "loss.csv");
  csv << "step,loss\n";
  auto log = train_stage(p, data, c.train_options(), [&](std::size_t step, double loss) {
    csv << step << ',' << loss << '\n';
    csv.flush();
    std::fprintf(stderr, "step %zu loss %.6f\n", step, loss);
  });
  save_denoiser((fs::path(c.out) / "model.ckpt").string(), p);
  std::printf("saved %s\n", (fs::path(c.out) / "model.ckpt").string().c_str());
  return 0;
}

FrameBuffer sample_frames(const ClipAnnotation& clip, const DenoiserParams& p, const SampleOptions& so) {
  const auto& m = p.cfg;
  if (m.frames == clip.frames) return sample_clip(clip, p, so).frames;
  if (m.frames != 1) {
    throw ConfigError("model generates " + std::to_string(m.frames) + " frames, annotation has " + std::to_string(clip.frames));
  }
  // Image-stage model: every frame independently, seeds offset by frame.
  std::vector<double> px;
  TrainExample ex{Tensor::zeros({clip.frames, m.height, m.width, m.channels}), clip};
  for (std::size_t t = 0; t < clip.frames; ++t) {
    auto one = single_frame(ex, t);
    auto opt = so;
    opt.seed = so.seed + t;
    auto fb = sample_clip(one.clip, p, opt).frames;
    px.insert(px.end(), fb.pixels.values().begin(), fb.pixels.values().end());
  }
  const auto patch = static_cast<std::size_t>(std::lround(std::sqrt(m.channels / 3.0)));
  return FrameBuffer{Tensor::from({clip.frames, m.height * patch, m.width * patch, 3}, std::move(px))};
}

int cmd_sample(RunConfig c, const std::vector<std::string>& files) {
  if (c.ckpt.empty() || !fs::exists(c.ckpt)) throw ConfigError("checkpoint '" + c.ckpt + "' not found");
  if (c.out.empty()) throw ConfigError("sample needs --out");
  if (files.empty()) throw ConfigError("sample needs at least one annotation file");
  auto p = load_denoiser(c.ckpt);
  const auto patch = static_cast<std::size_t>(std::lround(std::sqrt(p.cfg.channels / 3.0)));
  fs::create_directories(c.out);
  write_run_config(c.out, c);
  std::ostringstream index;
  std::set<std::string> used;
  for (const auto& f : files) {
    auto clip = parse_annotations(read_text_file(f), p.cfg.k_max);
    if (clip.width != p.cfg.width * patch || clip.height != p.cfg.height * patch) {
      throw ConfigError("'" + f + "' is " + std::to_string(clip.width) + "x" + std::to_string(clip.height) +
                        ", model generates " + std::to_string(p.cfg.width * patch) + "x" +
                        std::to_string(p.cfg.height * patch));
    }
    auto fb = sample_frames(clip, p, c.sample_options());
    // gen layout files are all called annotations.json: name by clip dir.
    const fs::path fp(f);
    auto name = fp.stem() == "annotations" && fp.has_parent_path() ? fp.parent_path().filename().string()
                                                                   : fp.stem().string();
    if (!used.insert(name).second) name += "_" + std::to_string(used.size());
    used.insert(name);
    write_clip(fs::path(c.out) / name, clip, fb);
    index << name << '\n';
    std::printf("sampled %s\n", name.c_str());
  }
  write_text_file((fs::path(c.out) / "index.txt").string(), index.str());
  return 0;
}

int cmd_eval(RunConfig c, bool self_check) {
  if (c.data.empty()) throw ConfigError("eval needs --data");
  auto ds = load_dataset(c.data, !self_check, c.max_instances);
  std::vector<GroundingReport> reps;
  nlohmann::ordered_json clips = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    const auto fb = self_check ? render_rectangles(ds.clips[i]) : ds.frames[i];
    reps.push_back(grounding_miou(ds.clips[i], fb));
    clips[ds.names[i]] = report_json(reps.back());
  }
  auto avg = average_reports(reps);
  std::map<std::string, std::string> echo;
  const auto cj = to_json(c);
  for (const auto& [k, v] : cj.items()) echo[k] = v.is_string() ? v.get<std::string>() : v.dump();
  auto j = report_json(avg, echo);
  j.erase("per_frame_iou");
  j["clips"] = clips;
  if (!c.out.empty()) {
    write_run_config(c.out, c);
    write_text_file((fs::path(c.out) / "report.json").string(), j.dump(2) + "\n");
  }
  std::printf("clips %zu  mean_iou %.4f  detection_rate %.4f  identity_consistency %.4f\n", reps.size(), avg.mean_iou,
              avg.detection_rate, avg.identity_consistency);
  if (self_check && avg.mean_iou < kSelfCheckMiou) {
    std::fprintf(stderr, "self-check failed: mean IoU %.4f < %.2f\n", avg.mean_iou, kSelfCheckMiou);
    return kExitCheckFailed;
  }
  return 0;
}

int cmd_gradcheck(RunConfig c, std::size_t seeds) {
  bool ok = true;
  std::ostringstream table;
  table << "seed,check,max_rel_error,pass\n";
  for (std::size_t s = 0; s < seeds; ++s) {
    for (const auto& r : run_grad_suite(c.seed + s)) {
      std::printf("%-4zu %-24s %.3e %s\n", c.seed + s, r.name.c_str(), r.max_error, r.pass() ? "PASS" : "FAIL");
      table << c.seed + s << ',' << r.name << ',' << r.max_error << ',' << (r.pass() ? 1 : 0) << '\n';
      ok = ok && r.pass();
    }
  }
  if (!c.out.empty()) {
    write_run_config(c.out, c);
    write_text_file((fs::path(c.out) / "gradcheck.csv").string(), table.str());
  }
  return ok ? 0 : kExitCheckFailed;
}

// Long flag name -> config key, for flags whose name differs.
const std::map<std::string, std::string> kFlagKeys = {
    {"no-instance-emb", "instance_emb"}, {"no-enhancer", "enhancer"}, {"enhancer-pos", "enhancer_pos"},
    {"motion-fusion", "motion_fusion"}, {"allow-cold-start", "allow_cold_start"}, {"sample-steps", "sample_steps"},
    {"encoder-blocks", "encoder_blocks"}, {"roi-grid", "roi_grid"}, {"fourier-freqs", "fourier_freqs"},
    {"max-instances", "max_instances"}, {"mlp-ratio", "mlp_ratio"}, {"clip-norm", "clip_norm"},
    {"cosine-decay", "cosine_decay"}, {"cond-drop", "cond_drop"}, {"log-every", "log_every"},
    {"schedule-steps", "schedule_steps"}, {"beta-start", "beta_start"}, {"beta-end", "beta_end"}};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trackdiff: box-tracklet conditioned video diffusion at desk scale"};
  app.require_subcommand(1);
  RunConfig c;
  std::string config_file;
  bool no_instance_emb = false, no_enhancer = false, self_check = false;
  std::size_t seeds = 1;
  std::vector<std::string> files;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", config_file, "JSON run config; flags given on the command line override it");
    s->add_option("--seed", c.seed, "seed for every random draw");
    s->add_option("--out", c.out, "output directory");
  };
  auto model_flags = [&](CLI::App* s) {
    s->add_option("--patch", c.patch, "patch size of the frame codec");
    s->add_option("--dim", c.dim);
    s->add_option("--heads", c.heads);
    s->add_option("--blocks", c.blocks);
    s->add_option("--encoder-blocks", c.encoder_blocks, "blocks [0, n) form the encoder half");
    s->add_option("--mlp-ratio", c.mlp_ratio);
    s->add_option("--roi-grid", c.roi_grid);
    s->add_option("--fourier-freqs", c.fourier_freqs);
    s->add_option("--max-instances", c.max_instances);
    s->add_option("--categories", c.categories);
    s->add_flag("--no-instance-emb", no_instance_emb, "ablation: drop instance embeddings");
    s->add_flag("--no-enhancer", no_enhancer, "ablation: drop the temporal instance enhancer");
    s->add_option("--fusion", c.fusion, "instance fusion: cross|self");
    s->add_option("--enhancer-pos", c.enhancer_pos, "encoder|decoder");
    s->add_option("--motion-fusion", c.motion_fusion, "concat|add");
    s->add_option("--schedule-steps", c.schedule_steps);
    s->add_option("--beta-start", c.beta_start);
    s->add_option("--beta-end", c.beta_end);
  };

  auto* gen = app.add_subcommand("gen", "write a synthetic dataset");
  common(gen);
  gen->add_option("--clips", c.clips);
  gen->add_option("--frames", c.frames);
  gen->add_option("--width", c.width);
  gen->add_option("--height", c.height);
  gen->add_option("--instances", c.instances, "clip i holds 1 + i mod N instances");
  gen->add_option("--max-instances", c.max_instances);
  gen->add_option("--categories", c.categories);

  auto* train = app.add_subcommand("train", "train one stage");
  common(train);
  model_flags(train);
  train->add_option("--data", c.data, "dataset directory written by gen");
  train->add_option("--stage", c.stage, "image|video");
  train->add_option("--init", c.init, "checkpoint to start from");
  train->add_flag("--allow-cold-start", c.allow_cold_start, "permit a video stage without --init");
  train->add_option("--steps", c.steps);
  train->add_option("--batch", c.batch);
  train->add_option("--optimizer", c.optimizer, "momentum|adam");
  train->add_option("--lr", c.lr);
  train->add_option("--momentum", c.momentum);
  train->add_option("--clip-norm", c.clip_norm, "0 disables");
  train->add_flag("--cosine-decay", c.cosine_decay);
  train->add_option("--cond-drop", c.cond_drop);
  train->add_option("--log-every", c.log_every);

  auto* sample = app.add_subcommand("sample", "generate frames for annotation files");
  common(sample);
  sample->add_option("--ckpt", c.ckpt, "trained checkpoint");
  sample->add_option("--cfg", c.cfg, "classifier-free guidance scale");
  sample->add_option("--sample-steps", c.sample_steps);
  sample->add_option("annotations", files, "annotation JSON files");

  auto* eval = app.add_subcommand("eval", "grounding report for a clip directory");
  common(eval);
  eval->add_option("--data", c.data, "directory written by gen or sample");
  eval->add_flag("--self-check", self_check, "score renderer output instead of stored frames");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference suite over all modules");
  common(grad);
  grad->add_option("--seeds", seeds, "number of consecutive seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    c.command = sub->get_name();
    c.instance_emb = !no_instance_emb;
    c.enhancer = !no_enhancer;
    if (!config_file.empty()) {
      // File first, then every flag that was actually given.
      auto flags = to_json(c);
      auto merged = run_config_from_json(nlohmann::json::parse(read_text_file(config_file)));
      auto out = to_json(merged);
      for (const auto* opt : sub->get_options()) {
        if (opt->count() == 0 || opt->get_lnames().empty()) continue;
        const auto& name = opt->get_lnames().front();
        if (name == "config" || name == "help" || name == "self-check" || name == "seeds") continue;
        auto it = kFlagKeys.find(name);
        const auto key = it != kFlagKeys.end() ? it->second : name;
        if (flags.contains(key)) out[key] = flags[key];
      }
      out["command"] = c.command;
      c = run_config_from_json(out);
    }
    c.validate();
    if (c.command == "gen") return cmd_gen(c);
    if (c.command == "train") return cmd_train(c);
    if (c.command == "sample") return cmd_sample(c, files);
    if (c.command == "eval") return cmd_eval(c, self_check);
    return cmd_gradcheck(c, seeds);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const AnnotationError& e) {
    std::fprintf(stderr, "annotation error: %s\n", e.what());
    return kExitConfig;
  } catch (const CapacityError& e) {
    std::fprintf(stderr, "capacity error: %s\n", e.what());
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
}
