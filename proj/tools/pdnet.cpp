#include "pdnet/data.hpp"
#include "pdnet/infer.hpp"
#include "pdnet/metrics.hpp"
#include "pdnet/refine.hpp"
#include "pdnet/rle.hpp"
#include "pdnet/service.hpp"
#include "pdnet/train.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pdnet;

namespace {

json read_json(const fs::path& path)
{
   std::ifstream in(path);
   if (!in) {
      throw std::runtime_error("cannot open " + path.string());
   }
   return json::parse(in);
}

void write_json(const fs::path& path, const json& j)
{
   if (path.has_parent_path()) {
      fs::create_directories(path.parent_path());
   }
   std::ofstream out(path);
   out << j.dump(2) << '\n';
}

fs::path index_path(const fs::path& data)
{
   return fs::is_directory(data) ? data / "index.csv" : data;
}

StageSpec stage_spec(const json& config, int stage)
{
   const auto key = "stage" + std::to_string(stage);
   json j = config.contains(key) ? config.at(key) : json::object();
   j["stage"] = stage;
   return stage_spec_from_json(j);
}

/// Training lesions (every split except "test").
std::vector<DatasetRecord> training_records(const DatasetIndex& index)
{
   std::vector<DatasetRecord> out;
   for (const auto& r : index.records) {
      if (r.split != "test") {
         out.push_back(r);
      }
   }
   if (out.empty()) {
      throw std::runtime_error("index has no training records");
   }
   return out;
}

Point2D parse_point(const std::string& text)
{
   double x = 0.0;
   double y = 0.0;
   char comma = 0;
   std::istringstream in(text);
   if (!(in >> x >> comma >> y) || comma != ',') {
      throw CLI::ValidationError("--click", "expected X,Y");
   }
   return {x, y};
}

json measurement_json(const MeasurementResult& r, const std::string& version)
{
   return {{"mask_rle", to_json(rle_encode(r.mask))},
           {"recist", to_json(r.recist)},
           {"long_mm", r.recist.long_mm()},
           {"short_mm", r.recist.short_mm()},
           {"loi", to_json(r.loi)},
           {"stage1_mask_rle", to_json(rle_encode(r.stage1_mask))},
           {"model_version", version}};
}

void print_step(const StepLoss& s)
{
   if (s.step % 25 == 0) {
      std::fprintf(stderr, "step %5d epoch %3d lr %.1e  l_seg %.4f  l_dp %.5f  total %.5f\n", s.step, s.epoch, s.lr,
                   s.l_seg, s.l_dp, s.total);
   }
}

} // namespace

int main(int argc, char** argv)
{
   CLI::App app{"Click-guided lesion segmentation and RECIST measurement"};
   app.require_subcommand(1);

   // synth
   auto* synth = app.add_subcommand("synth", "Generate a synthetic lesion dataset");
   fs::path synth_out;
   int synth_n = 64;
   int synth_size = 128;
   std::uint64_t synth_seed = 0;
   double test_fraction = 0.0;
   double perturbation = SynthOptions{}.perturbation;
   synth->add_option("--out", synth_out, "Output directory")->required();
   synth->add_option("--n", synth_n, "Number of slices")->check(CLI::PositiveNumber);
   synth->add_option("--size", synth_size, "Slice side in pixels")->check(CLI::Range(32, 4096));
   synth->add_option("--seed", synth_seed);
   synth->add_option("--test-fraction", test_fraction, "Fraction of patients tagged test")->check(CLI::Range(0.0, 1.0));
   synth->add_option("--perturbation", perturbation, "Boundary perturbation amplitude")->check(CLI::Range(0.0, 0.5));

   // train
   auto* train = app.add_subcommand("train", "Train one stage");
   int train_stage_n = 2;
   fs::path train_data;
   fs::path train_config;
   fs::path train_out;
   int train_round = 1;
   std::optional<std::uint64_t> train_seed;
   std::optional<int> train_steps;
   std::string supervision = "pseudo";
   train->add_option("--stage", train_stage_n)->check(CLI::IsMember({1, 2}))->required();
   train->add_option("--data", train_data, "Dataset directory or index.csv")->required();
   train->add_option("--config", train_config, "JSON config");
   train->add_option("--out", train_out, "Checkpoint directory")->required();
   train->add_option("--round", train_round, "Round number recorded in the checkpoint");
   train->add_option("--seed", train_seed);
   train->add_option("--steps", train_steps, "Stop after this many steps")->check(CLI::PositiveNumber);
   train->add_option("--supervision", supervision, "pseudo (ellipse + snake) or gt (dataset masks)")
       ->check(CLI::IsMember({"pseudo", "gt"}));

   // refine
   auto* refine = app.add_subcommand("refine", "Iterative pseudo-mask refinement");
   int rounds = 3;
   fs::path refine_data;
   fs::path refine_config;
   fs::path refine_out;
   std::optional<std::uint64_t> refine_seed;
   std::vector<int> refine_stages{2};
   refine->add_option("--rounds", rounds)->check(CLI::PositiveNumber);
   refine->add_option("--data", refine_data)->required();
   refine->add_option("--config", refine_config);
   refine->add_option("--out", refine_out)->required();
   refine->add_option("--seed", refine_seed);
   refine->add_option("--stages", refine_stages, "Stages trained each round")->check(CLI::IsMember({1, 2}));

   // infer
   auto* infer = app.add_subcommand("infer", "Two-stage measurement from one click");
   fs::path slice_path;
   std::optional<double> slice_spacing;
   std::string click_text;
   fs::path ckpt1;
   fs::path ckpt2;
   fs::path infer_out = "result.json";
   fs::path infer_config;
   infer->add_option("--slice", slice_path, "16-bit slice PNG")->required();
   infer->add_option("--spacing", slice_spacing, "Pixel spacing in mm (otherwise read from the sidecar)");
   infer->add_option("--click", click_text, "X,Y")->required();
   infer->add_option("--ckpt1", ckpt1)->required();
   infer->add_option("--ckpt2", ckpt2)->required();
   infer->add_option("--out", infer_out);
   infer->add_option("--config", infer_config);

   // predict
   auto* predict = app.add_subcommand("predict", "Measure every lesion of a split, clicking the annotation center");
   fs::path predict_data;
   fs::path predict_out;
   std::string predict_split = "test";
   predict->add_option("--data", predict_data)->required();
   predict->add_option("--ckpt1", ckpt1)->required();
   predict->add_option("--ckpt2", ckpt2)->required();
   predict->add_option("--out", predict_out)->required();
   predict->add_option("--split", predict_split, "Split to measure; empty for all");
   predict->add_option("--config", infer_config);

   // eval
   auto* eval = app.add_subcommand("eval", "Score predictions against the dataset");
   fs::path eval_data;
   fs::path eval_pred;
   fs::path eval_out;
   eval->add_option("--data", eval_data)->required();
   eval->add_option("--pred", eval_pred, "Directory of <id>.json measurements")->required();
   eval->add_option("--out", eval_out, "Report directory (defaults to --pred)");

   // serve
   auto* serve = app.add_subcommand("serve", "HTTP measurement service");
   fs::path serve_index;
   std::string host = "127.0.0.1";
   int port = 8080;
   serve->add_option("--ckpt1", ckpt1)->required();
   serve->add_option("--ckpt2", ckpt2)->required();
   serve->add_option("--index", serve_index, "Dataset directory or index.csv");
   serve->add_option("--host", host);
   serve->add_option("--port", port)->check(CLI::Range(1, 65535));
   serve->add_option("--config", infer_config);

   CLI11_PARSE(app, argc, argv);

   try {
      const json infer_json = infer_config.empty() ? json::object() : read_json(infer_config);
      const auto infer_cfg =
          infer_config_from_json(infer_json.contains("infer") ? infer_json.at("infer") : json::object());

      if (*synth) {
         SynthOptions opts;
         opts.test_fraction = test_fraction;
         opts.perturbation = perturbation;
         const auto index = synth_dataset(synth_n, synth_size, synth_seed, synth_out, opts);
         std::printf("wrote %zu slices to %s\n", index.records.size(), synth_out.string().c_str());
      } else if (*train) {
         const json config = train_config.empty() ? json::object() : read_json(train_config);
         auto spec = stage_spec(config, train_stage_n);
         if (train_seed) {
            spec.train.seed = *train_seed;
         }
         if (train_steps) {
            spec.train.max_steps = *train_steps;
         }
         const auto index = read_index(index_path(train_data));
         RefineConfig rc;
         rc.stages = {spec};
         std::vector<StageSample> samples;
         for (const auto& rec : training_records(index)) {
            const auto slice = load_record_slice(index, rec);
            TriStateMask mask;
            if (supervision == "gt") {
               const auto gt = load_record_mask(index, rec);
               if (!gt) {
                  throw std::runtime_error("record " + rec.id + " has no mask");
               }
               mask = TriStateMask::from_binary(*gt);
            } else {
               mask = initial_pseudo_mask(make_refine_input(slice, rec.recist), rc);
            }
            samples.push_back(make_stage_sample(slice, mask, rec.recist));
         }
         auto result = train_stage(spec, samples, train_out, print_step);
         result.meta.extra["round"] = train_round;
         result.meta.extra["supervision"] = supervision;
         save_checkpoint(train_out, result.model, result.meta);
         std::printf("final total loss %.6f after %zu steps; checkpoint in %s\n", result.log.back().total,
                     result.log.size(), train_out.string().c_str());
      } else if (*refine) {
         const json config = refine_config.empty() ? json::object() : read_json(refine_config);
         RefineConfig rc;
         rc.rounds = rounds;
         for (int s : refine_stages) {
            auto spec = stage_spec(config, s);
            if (refine_seed) {
               spec.train.seed = *refine_seed;
            }
            rc.stages.push_back(spec);
         }
         rc.infer = infer_cfg;
         const auto index = read_index(index_path(refine_data));
         std::vector<RefineInput> inputs;
         for (const auto& rec : training_records(index)) {
            inputs.push_back(make_refine_input(load_record_slice(index, rec), rec.recist, load_record_mask(index, rec)));
         }
         const auto result = iterative_refinement(inputs, rc, refine_out, [](const RoundStats& s) {
            std::printf("%s\n", to_json(s).dump().c_str());
            std::fflush(stdout);
         }, print_step);
         std::printf("final checkpoints in %s/round_%d\n", refine_out.string().c_str(), rounds);
      } else if (*infer) {
         auto s1 = load_checkpoint(ckpt1);
         auto s2 = load_checkpoint(ckpt2);
         const auto slice = load_slice(slice_path, slice_spacing);
         const auto result = infer_two_stage(slice, parse_point(click_text), s1.model, s2.model, infer_cfg);
         write_json(infer_out, measurement_json(result, s1.model_version + "+" + s2.model_version));
         std::printf("long %.2f mm, short %.2f mm -> %s\n", result.recist.long_mm(), result.recist.short_mm(),
                     infer_out.string().c_str());
      } else if (*predict) {
         auto s1 = load_checkpoint(ckpt1);
         auto s2 = load_checkpoint(ckpt2);
         const auto index = read_index(index_path(predict_data));
         int written = 0;
         for (const auto& rec : index.records) {
            if (!predict_split.empty() && rec.split != predict_split) {
               continue;
            }
            const auto slice = load_record_slice(index, rec);
            const auto click = ellipse_from_recist(rec.recist).center;
            try {
               const auto r = infer_two_stage(slice, click, s1.model, s2.model, infer_cfg);
               write_json(predict_out / (rec.id + ".json"), measurement_json(r, s1.model_version + "+" + s2.model_version));
            } catch (const NoLesionAtClick&) {
               write_json(predict_out / (rec.id + ".json"), {{"error", "no lesion at click"}});
            }
            ++written;
         }
         std::printf("wrote %d predictions to %s\n", written, predict_out.string().c_str());
      } else if (*eval) {
         const auto index = read_index(index_path(eval_data));
         std::vector<LesionResult> results;
         for (const auto& entry : fs::directory_iterator(eval_pred)) {
            if (entry.path().extension() != ".json" || entry.path().stem() == "report") {
               continue;
            }
            const auto id = entry.path().stem().string();
            const auto* rec = index.find(id);
            if (!rec) {
               throw std::runtime_error("prediction " + id + " is not in the index");
            }
            const auto pred = read_json(entry.path());
            LesionResult lr;
            lr.id = id;
            const auto gt = load_record_mask(index, *rec);
            if (pred.contains("error")) {
               if (gt) {
                  lr.seg = seg_scores(BinaryMask(gt->height(), gt->width(), 0), *gt);
               }
            } else {
               if (gt) {
                  lr.seg = seg_scores(rle_decode(rle_from_json(pred.at("mask_rle"))), *gt);
               }
               lr.diam = diam_errors(recist_from_json(pred.at("recist")), rec->recist);
            }
            results.push_back(std::move(lr));
         }
         std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
         const auto report = aggregate(results);
         const auto out = eval_out.empty() ? eval_pred : eval_out;
         write_json(out / "report.json", report.to_json());
         std::ofstream(out / "report.txt") << report.to_text();
         std::printf("%s", report.to_text().c_str());
      } else if (*serve) {
         std::optional<DatasetIndex> index;
         if (!serve_index.empty()) {
            index = read_index(index_path(serve_index));
         }
         MeasureService service(load_checkpoint(ckpt1), load_checkpoint(ckpt2), std::move(index), infer_cfg);
         httplib::Server server;
         service.mount(server);
         std::printf("serving model %s on http://%s:%d\n", service.model_version().c_str(), host.c_str(), port);
         std::fflush(stdout);
         if (!server.listen(host, port)) {
            throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
         }
      }
   } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
   }
   return 0;
}
