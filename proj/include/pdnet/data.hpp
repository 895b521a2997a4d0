#pragma once

#include "pdnet/geometry.hpp"
#include "pdnet/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pdnet {

/// Hounsfield units are stored in 16-bit grayscale with this offset added.
inline constexpr int kHuOffset = 32768;

struct CtSlice {
   Image<std::int16_t> pixels; ///< Hounsfield units
   double spacing_mm = 1.0;
   std::string id;

   int height() const { return pixels.height(); }
   int width() const { return pixels.width(); }
};

/// Reads a 16-bit grayscale image storing HU + 32768. Spacing comes from `spacing_mm`
/// when given, otherwise from the `<path>.json` sidecar ({"spacing_mm": s}).
CtSlice load_slice(const std::filesystem::path& path, std::optional<double> spacing_mm = std::nullopt);

/// Writes the 16-bit image and its spacing sidecar.
void save_slice(const std::filesystem::path& path, const CtSlice& slice);

BinaryMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);

struct HuWindow {
   double lo = -1024.0;
   double hi = 1050.0;
};

/// Clip to [lo, hi] and map affinely onto [0, 1].
RealImage window_normalize(const CtSlice& slice, HuWindow window = {});

/// Minimum HU of the slice (the pad value for out-of-bounds crops).
std::int16_t slice_minimum(const CtSlice& slice);

struct DatasetRecord {
   std::string id;
   std::filesystem::path image_path; ///< relative to the index directory
   double spacing_mm = 1.0;
   RecistAnnotation recist;
   std::optional<std::filesystem::path> mask_path;
   std::string split;
   std::string patient_id; ///< optional trailing column
};

struct DatasetIndex {
   std::filesystem::path root;
   std::vector<DatasetRecord> records;

   std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : root / p; }
   const DatasetRecord* find(const std::string& id) const;
   DatasetIndex subset(const std::string& split) const;
};

/// CSV: id,image_path,spacing_mm,x1,y1,x2,y2,x3,y3,x4,y4,mask_path,split[,patient_id]
DatasetIndex read_index(const std::filesystem::path& csv_path);
void write_index(const DatasetIndex& index, const std::filesystem::path& csv_path);

/// Loads the slice of a record using the index spacing.
CtSlice load_record_slice(const DatasetIndex& index, const DatasetRecord& record);
std::optional<BinaryMask> load_record_mask(const DatasetIndex& index, const DatasetRecord& record);

/// Endpoints inside the slice, positive spacing, non-empty mask when present.
/// Throws std::invalid_argument naming the record on failure.
void validate_record(const DatasetIndex& index, const DatasetRecord& record);

/// No patient id appears in more than one split. Records without a patient id are ignored.
bool splits_patient_disjoint(const DatasetIndex& index);

/// Reassigns splits so that patients are never shared; `train_fraction` of patients go to "train",
/// the rest to "test". Records without a patient id count as their own patient.
void split_by_patient(DatasetIndex& index, double train_fraction, std::uint64_t seed);

struct SynthOptions {
   double perturbation = 0.12;        ///< relative amplitude of the radial Fourier boundary term
   int harmonics = 4;                 ///< highest radial harmonic
   double contrast_min = 0.1;         ///< lesion contrast in window units
   double contrast_max = 0.5;
   double blur_sigma = 1.0;           ///< boundary blur in px; 0 disables
   double noise_hu = 20.0;            ///< white noise std
   double texture_hu = 30.0;          ///< low-frequency background texture amplitude
   double min_radius_frac = 1.0 / 14.0;
   double max_radius_frac = 1.0 / 6.0;
   double min_axis_ratio = 0.6;       ///< semi-minor / semi-major lower bound
   double spacing_min_mm = 0.6;
   double spacing_max_mm = 1.0;
   double test_fraction = 0.0;        ///< fraction of patients tagged "test"
};

struct SyntheticSample {
   CtSlice slice;
   BinaryMask mask;
   RecistAnnotation recist;
   EllipseParams shape; ///< unperturbed lesion ellipse
};

/// One synthetic slice with a single lesion. Deterministic in (size, seed, opts).
SyntheticSample synth_sample(int size, std::uint64_t seed, const SynthOptions& opts = {});

/// Generates `n` samples into `out_dir` (slices, masks, index.csv). Deterministic in the seed.
DatasetIndex synth_dataset(int n, int size, std::uint64_t seed, const std::filesystem::path& out_dir,
                           const SynthOptions& opts = {});

} // namespace pdnet
