#include "pdnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace fs = std::filesystem;

namespace pdnet {

void TrainConfig::validate() const
{
   if (!(lr > 0.0)) {
      throw std::invalid_argument("TrainConfig: lr must be positive");
   }
   if (epochs < 1 || batch_size < 1) {
      throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
   }
   for (int e : decay_epochs) {
      if (e >= epochs) {
         throw std::invalid_argument("TrainConfig: decay epochs must precede the final epoch");
      }
   }
   if (max_steps && *max_steps < 1) {
      throw std::invalid_argument("TrainConfig: max_steps must be positive");
   }
}

nlohmann::json to_json(const TrainConfig& c)
{
   nlohmann::json j{{"optimizer", "adam"},
                    {"lr", c.lr},
                    {"epochs", c.epochs},
                    {"decay_epochs", c.decay_epochs},
                    {"decay_factor", c.decay_factor},
                    {"batch_size", c.batch_size},
                    {"seed", c.seed},
                    {"fixed_batch", c.fixed_batch}};
   if (c.max_steps) {
      j["max_steps"] = *c.max_steps;
   }
   return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j)
{
   TrainConfig c;
   c.lr = j.value("lr", c.lr);
   c.epochs = j.value("epochs", c.epochs);
   c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
   c.decay_factor = j.value("decay_factor", c.decay_factor);
   c.batch_size = j.value("batch_size", c.batch_size);
   c.seed = j.value("seed", c.seed);
   c.fixed_batch = j.value("fixed_batch", c.fixed_batch);
   if (j.contains("max_steps")) {
      c.max_steps = j.at("max_steps").get<int>();
   }
   c.validate();
   return c;
}

double lr_at_epoch(const TrainConfig& cfg, int epoch)
{
   double lr = cfg.lr;
   for (int e : cfg.decay_epochs) {
      if (epoch >= e) {
         lr *= cfg.decay_factor;
      }
   }
   return lr;
}

double default_sigma(int stage)
{
   return stage == 1 ? 3.0 : 7.0;
}

StageSample make_stage_sample(const CtSlice& slice, const TriStateMask& mask, const RecistAnnotation& recist,
                              HuWindow window)
{
   if (mask.height() != slice.height() || mask.width() != slice.width()) {
      throw std::invalid_argument("make_stage_sample: mask shape differs from slice");
   }
   StageSample s;
   s.id = slice.id;
   s.image = window_normalize(slice, window);
   s.pad = static_cast<float>(std::clamp((double(slice_minimum(slice)) - window.lo) / (window.hi - window.lo), 0.0, 1.0));
   s.mask = mask;
   s.recist = recist;
   return s;
}

nlohmann::json to_json(const StepLoss& s)
{
   return {{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr}, {"l_seg", s.l_seg}, {"l_dp", s.l_dp}, {"total", s.total}};
}

nlohmann::json to_json(const StageSpec& spec)
{
   return {{"stage", spec.stage},
           {"sigma", spec.sigma},
           {"model", to_json(spec.model)},
           {"train", to_json(spec.train)},
           {"loss", to_json(spec.loss)},
           {"augment", to_json(spec.augment)}};
}

StageSpec stage_spec_from_json(const nlohmann::json& j)
{
   StageSpec spec;
   spec.stage = j.value("stage", spec.stage);
   if (spec.stage != 1 && spec.stage != 2) {
      throw std::invalid_argument("StageSpec: stage must be 1 or 2");
   }
   spec.model.input_size = spec.stage == 1 ? 512 : 256;
   spec.sigma = j.value("sigma", default_sigma(spec.stage));
   if (j.contains("model")) {
      auto m = to_json(spec.model);
      m.update(j.at("model"));
      spec.model = model_config_from_json(m);
   }
   if (j.contains("train")) {
      spec.train = train_config_from_json(j.at("train"));
   }
   if (j.contains("loss")) {
      spec.loss = loss_config_from_json(j.at("loss"));
   }
   if (j.contains("augment")) {
      spec.augment = augment_config_from_json(j.at("augment"));
   }
   return spec;
}

Point2D training_click(const TrainingSample& sample, std::uint64_t seed)
{
   const int n = sample.image.width();
   Point2D click;
   try {
      click = sample_click(ellipse_from_recist(sample.recist), seed);
   } catch (const std::invalid_argument&) {
      double sx = 0.0;
      double sy = 0.0;
      std::size_t count = 0;
      for (int y = 0; y < sample.mask.height(); ++y) {
         for (int x = 0; x < sample.mask.width(); ++x) {
            if (sample.mask(x, y) == Label::Foreground) {
               sx += x;
               sy += y;
               ++count;
            }
         }
      }
      click = count > 0 ? Point2D{sx / double(count), sy / double(count)} : sample.recist.long_a;
   }
   click.x = std::clamp(click.x, 0.0, n - 1.0);
   click.y = std::clamp(click.y, 0.0, n - 1.0);
   return click;
}

std::vector<std::int64_t> mask_side_sizes(const ModelConfig& cfg)
{
   std::vector<std::int64_t> sizes;
   const std::int64_t s = cfg.input_size;
   const int groups = cfg.enable_pe ? 2 : 1;
   for (int g = 0; g < groups; ++g) {
      for (int k = 1; k <= kNumScales; ++k) {
         sizes.push_back(s >> k);
      }
   }
   sizes.push_back(s);
   return sizes;
}

Batch make_batch(const std::vector<TrainingSample>& samples, const std::vector<Point2D>& clicks,
                 const ModelConfig& cfg, double sigma)
{
   if (samples.empty() || samples.size() != clicks.size()) {
      throw std::invalid_argument("make_batch: need one click per sample");
   }
   const int n = cfg.input_size;
   std::vector<torch::Tensor> ct;
   std::vector<torch::Tensor> prior;
   std::vector<torch::Tensor> fg;
   std::vector<torch::Tensor> ignore;
   std::array<std::vector<torch::Tensor>, 3> heat;
   for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.image.height() != n || s.image.width() != n) {
         throw std::invalid_argument("make_batch: sample size differs from the model input");
      }
      ct.push_back(to_tensor(s.image));
      prior.push_back(make_prior3(s.image, clicks[i]));
      auto fgm = torch::zeros({1, n, n});
      auto igm = torch::zeros({1, n, n});
      auto fa = fgm.accessor<float, 3>();
      auto ia = igm.accessor<float, 3>();
      for (int y = 0; y < n; ++y) {
         for (int x = 0; x < n; ++x) {
            const auto l = s.mask(x, y);
            fa[0][y][x] = l == Label::Foreground ? 1.0f : 0.0f;
            ia[0][y][x] = l == Label::Ignore ? 1.0f : 0.0f;
         }
      }
      fg.push_back(fgm);
      ignore.push_back(igm);
      const auto pts = s.recist.endpoints();
      for (int r = 0; r < 3; ++r) {
         const double f = double(1 << r);
         const int size = n >> r;
         std::vector<torch::Tensor> maps;
         for (const auto& p : pts) {
            const Point2D q{(p.x + 0.5) / f - 0.5, (p.y + 0.5) / f - 0.5};
            maps.push_back(to_tensor(gaussian_map(q, size, size, sigma / f)));
         }
         heat[r].push_back(torch::cat(maps, 0));
      }
   }
   Batch b;
   b.ct = torch::stack(ct);
   b.prior3 = torch::stack(prior);
   b.mask_targets = make_mask_targets(torch::stack(fg), torch::stack(ignore), mask_side_sizes(cfg));
   for (auto& h : heat) {
      b.heat_targets.push_back(torch::stack(h));
   }
   return b;
}

TrainingSample draw_sample(const StageSpec& spec, const StageSample& sample, std::uint64_t seed)
{
   if (spec.stage == 1) {
      return augment_stage1(sample.image, sample.mask, sample.recist, spec.augment, seed, spec.model.input_size,
                            sample.pad);
   }
   return augment_stage2(sample.image, sample.mask, sample.recist, spec.augment, seed, spec.model.input_size,
                         sample.pad);
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed)
{
   std::vector<std::size_t> order(n);
   for (std::size_t i = 0; i < n; ++i) {
      order[i] = i;
   }
   std::mt19937_64 rng(seed);
   for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
   }
   return order;
}

void write_nan_dump(const fs::path& path, const StepLoss& step, const Batch& batch)
{
   nlohmann::json j;
   j["step"] = step.step;
   j["epoch"] = step.epoch;
   j["l_seg"] = std::isfinite(step.l_seg) ? nlohmann::json(step.l_seg) : nlohmann::json("non-finite");
   j["l_dp"] = std::isfinite(step.l_dp) ? nlohmann::json(step.l_dp) : nlohmann::json("non-finite");
   j["sample_ids"] = batch.ids;
   j["sample_seeds"] = batch.seeds;
   j["input_min"] = batch.ct.min().item<double>();
   j["input_max"] = batch.ct.max().item<double>();
   std::ofstream out(path);
   out << j.dump(2) << '\n';
}

} // namespace

TrainResult train_stage(const StageSpec& spec, const std::vector<StageSample>& data,
                        const std::optional<fs::path>& out_dir, const ProgressFn& progress)
{
   if (data.empty()) {
      throw std::invalid_argument("train_stage: empty dataset");
   }
   spec.train.validate();
   spec.loss.validate();
   spec.model.validate();
   spec.augment.validate();

   torch::manual_seed(spec.train.seed);
   TrainResult result;
   result.model = PdNet(spec.model);
   result.model->train();
   torch::optim::Adam optimizer(result.model->parameters(), torch::optim::AdamOptions(spec.train.lr));

   const auto batch_size = static_cast<std::size_t>(spec.train.batch_size);
   const auto steps_per_epoch = static_cast<int>((data.size() + batch_size - 1) / batch_size);
   const int total_steps = spec.train.max_steps ? *spec.train.max_steps : spec.train.epochs * steps_per_epoch;

   std::optional<std::ofstream> log_file;
   if (out_dir) {
      fs::create_directories(*out_dir);
      log_file.emplace(*out_dir / "log.jsonl");
   }

   std::vector<std::size_t> order;
   int order_epoch = -1;
   for (int step = 0; step < total_steps; ++step) {
      const int epoch = spec.train.fixed_batch ? 0 : step / steps_per_epoch;
      const int in_epoch = spec.train.fixed_batch ? 0 : step % steps_per_epoch;
      if (epoch != order_epoch) {
         order = epoch_order(data.size(), derive_seed(spec.train.seed, 0x5eed, std::uint64_t(epoch)));
         order_epoch = epoch;
      }
      const double lr = lr_at_epoch(spec.train, epoch);
      for (auto& group : optimizer.param_groups()) {
         static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      }

      std::vector<TrainingSample> samples;
      std::vector<Point2D> clicks;
      std::vector<std::string> ids;
      std::vector<std::uint64_t> seeds;
      for (std::size_t b = 0; b < std::min(batch_size, data.size()); ++b) {
         const auto idx = order[(std::size_t(in_epoch) * batch_size + b) % data.size()];
         const auto seed = derive_seed(spec.train.seed, idx + 1, std::uint64_t(epoch));
         samples.push_back(draw_sample(spec, data[idx], seed));
         clicks.push_back(training_click(samples.back(), derive_seed(seed, 0xc11c)));
         ids.push_back(data[idx].id);
         seeds.push_back(seed);
      }
      auto batch = make_batch(samples, clicks, spec.model, spec.sigma);
      batch.ids = std::move(ids);
      batch.seeds = std::move(seeds);

      optimizer.zero_grad();
      const auto out = result.model->forward(batch.ct, batch.prior3);
      const auto l_seg = seg_loss(out.mask_side, batch.mask_targets, spec.loss);
      const auto l_dp = diam_loss(out.diam_side, batch.heat_targets);

      StepLoss rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.l_seg = l_seg.item<double>();
      rec.l_dp = l_dp.item<double>();
      if (!std::isfinite(rec.l_seg) || !std::isfinite(rec.l_dp)) {
         const auto dump = (out_dir ? *out_dir : fs::temp_directory_path()) / "nan_dump.json";
         write_nan_dump(dump, rec, batch);
         throw TrainingDiverged("train_stage: non-finite loss at step " + std::to_string(step) + "; batch dumped to " +
                                dump.string());
      }
      const auto total = total_loss(l_seg, l_dp, spec.loss);
      rec.total = total.item<double>();
      total.backward();
      optimizer.step();

      result.log.push_back(rec);
      if (log_file) {
         *log_file << nlohmann::json{{"step", rec.step}, {"l_seg", rec.l_seg}, {"l_dp", rec.l_dp}, {"total", rec.total}}
                          .dump()
                   << '\n';
      }
      if (progress) {
         progress(rec);
      }
   }

   result.model->eval();
   result.meta.model = spec.model;
   result.meta.stage = spec.stage;
   result.meta.sigma = spec.sigma;
   result.meta.lambda = spec.loss.lambda;
   result.meta.extra = {{"train", to_json(spec.train)}, {"augment", to_json(spec.augment)}, {"steps", total_steps}};
   if (out_dir) {
      save_checkpoint(*out_dir, result.model, result.meta);
      std::ofstream metrics(*out_dir / "metrics.json");
      metrics << nlohmann::json{{"steps", total_steps},
                                {"final", to_json(result.log.back())},
                                {"first", to_json(result.log.front())}}
                    .dump(2)
              << '\n';
   }
   return result;
}

} // namespace pdnet
