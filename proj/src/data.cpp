#include "pdnet/data.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

namespace fs = std::filesystem;

namespace pdnet {

namespace {

fs::path sidecar_path(const fs::path& image) { return fs::path(image.string() + ".json"); }

std::vector<std::string> split_csv_line(const std::string& line)
{
   std::vector<std::string> out;
   std::string field;
   std::istringstream in(line);
   while (std::getline(in, field, ',')) {
      out.push_back(field);
   }
   if (!line.empty() && line.back() == ',') {
      out.emplace_back();
   }
   return out;
}

std::string trim(std::string s)
{
   const auto not_space = [](unsigned char c) { return !std::isspace(c); };
   s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
   s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
   return s;
}

double parse_double(const std::string& s, const char* what)
{
   try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) {
         throw std::invalid_argument(s);
      }
      return v;
   } catch (const std::exception&) {
      throw std::invalid_argument(std::string("index: bad ") + what + " '" + s + "'");
   }
}

} // namespace

CtSlice load_slice(const fs::path& path, std::optional<double> spacing_mm)
{
   const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
   if (raw.empty()) {
      throw std::runtime_error("load_slice: cannot read " + path.string());
   }
   if (raw.depth() != CV_16U || raw.channels() != 1) {
      throw std::invalid_argument("load_slice: expected 16-bit single-channel image: " + path.string());
   }
   if (!spacing_mm) {
      std::ifstream side(sidecar_path(path));
      if (!side) {
         throw std::invalid_argument("load_slice: missing spacing sidecar for " + path.string());
      }
      const auto j = nlohmann::json::parse(side);
      if (!j.contains("spacing_mm")) {
         throw std::invalid_argument("load_slice: sidecar lacks spacing_mm: " + path.string());
      }
      spacing_mm = j.at("spacing_mm").get<double>();
   }
   if (!(*spacing_mm > 0.0)) {
      throw std::invalid_argument("load_slice: spacing must be positive");
   }

   CtSlice slice;
   slice.id = path.stem().string();
   slice.spacing_mm = *spacing_mm;
   slice.pixels = Image<std::int16_t>(raw.rows, raw.cols);
   for (int y = 0; y < raw.rows; ++y) {
      const auto* row = raw.ptr<std::uint16_t>(y);
      for (int x = 0; x < raw.cols; ++x) {
         slice.pixels(x, y) = static_cast<std::int16_t>(int(row[x]) - kHuOffset);
      }
   }
   return slice;
}

void save_slice(const fs::path& path, const CtSlice& slice)
{
   cv::Mat raw(slice.height(), slice.width(), CV_16UC1);
   for (int y = 0; y < raw.rows; ++y) {
      auto* row = raw.ptr<std::uint16_t>(y);
      for (int x = 0; x < raw.cols; ++x) {
         row[x] = static_cast<std::uint16_t>(int(slice.pixels(x, y)) + kHuOffset);
      }
   }
   if (path.has_parent_path()) {
      fs::create_directories(path.parent_path());
   }
   if (!cv::imwrite(path.string(), raw)) {
      throw std::runtime_error("save_slice: cannot write " + path.string());
   }
   std::ofstream side(sidecar_path(path));
   side << nlohmann::json{{"spacing_mm", slice.spacing_mm}}.dump() << '\n';
}

BinaryMask load_mask(const fs::path& path)
{
   const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
   if (raw.empty()) {
      throw std::runtime_error("load_mask: cannot read " + path.string());
   }
   BinaryMask mask(raw.rows, raw.cols, 0);
   for (int y = 0; y < raw.rows; ++y) {
      const auto* row = raw.ptr<std::uint8_t>(y);
      for (int x = 0; x < raw.cols; ++x) {
         mask(x, y) = row[x] != 0 ? 1 : 0;
      }
   }
   return mask;
}

void save_mask(const fs::path& path, const BinaryMask& mask)
{
   cv::Mat raw(mask.height(), mask.width(), CV_8UC1);
   for (int y = 0; y < raw.rows; ++y) {
      for (int x = 0; x < raw.cols; ++x) {
         raw.at<std::uint8_t>(y, x) = mask(x, y) != 0 ? 255 : 0;
      }
   }
   if (path.has_parent_path()) {
      fs::create_directories(path.parent_path());
   }
   if (!cv::imwrite(path.string(), raw)) {
      throw std::runtime_error("save_mask: cannot write " + path.string());
   }
}

RealImage window_normalize(const CtSlice& slice, HuWindow window)
{
   if (!(window.lo < window.hi)) {
      throw std::invalid_argument("window_normalize: lo must be below hi");
   }
   RealImage out(slice.height(), slice.width(), 0.0f);
   const double span = window.hi - window.lo;
   for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = std::clamp(double(slice.pixels[i]), window.lo, window.hi);
      out[i] = static_cast<float>((v - window.lo) / span);
   }
   return out;
}

std::int16_t slice_minimum(const CtSlice& slice)
{
   const auto px = slice.pixels.pixels();
   return px.empty() ? std::int16_t{0} : *std::min_element(px.begin(), px.end());
}

const DatasetRecord* DatasetIndex::find(const std::string& id) const
{
   for (const auto& r : records) {
      if (r.id == id) {
         return &r;
      }
   }
   return nullptr;
}

DatasetIndex DatasetIndex::subset(const std::string& split) const
{
   DatasetIndex out{root, {}};
   for (const auto& r : records) {
      if (r.split == split) {
         out.records.push_back(r);
      }
   }
   return out;
}

DatasetIndex read_index(const fs::path& csv_path)
{
   std::ifstream in(csv_path);
   if (!in) {
      throw std::runtime_error("read_index: cannot open " + csv_path.string());
   }
   DatasetIndex index;
   index.root = csv_path.parent_path();
   std::string line;
   if (!std::getline(in, line)) {
      throw std::invalid_argument("read_index: empty index");
   }
   const auto header = split_csv_line(trim(line));
   if (header.size() < 13 || header[0] != "id" || header[1] != "image_path" || header[12] != "split") {
      throw std::invalid_argument("read_index: unexpected header");
   }
   while (std::getline(in, line)) {
      line = trim(line);
      if (line.empty()) {
         continue;
      }
      auto f = split_csv_line(line);
      if (f.size() < 13) {
         throw std::invalid_argument("read_index: short row: " + line);
      }
      for (auto& s : f) {
         s = trim(s);
      }
      DatasetRecord r;
      r.id = f[0];
      r.image_path = f[1];
      r.spacing_mm = parse_double(f[2], "spacing_mm");
      std::array<Point2D, 4> pts;
      for (int k = 0; k < 4; ++k) {
         pts[k] = {parse_double(f[3 + 2 * k], "x"), parse_double(f[4 + 2 * k], "y")};
      }
      r.recist = RecistAnnotation::from_endpoints(pts, r.spacing_mm);
      if (!f[11].empty()) {
         r.mask_path = fs::path(f[11]);
      }
      r.split = f[12];
      if (f.size() > 13) {
         r.patient_id = f[13];
      }
      index.records.push_back(std::move(r));
   }
   return index;
}

void write_index(const DatasetIndex& index, const fs::path& csv_path)
{
   if (csv_path.has_parent_path()) {
      fs::create_directories(csv_path.parent_path());
   }
   std::ofstream out(csv_path);
   out << "id,image_path,spacing_mm,x1,y1,x2,y2,x3,y3,x4,y4,mask_path,split,patient_id\n";
   out << std::setprecision(std::numeric_limits<double>::max_digits10);
   for (const auto& r : index.records) {
      out << r.id << ',' << r.image_path.generic_string() << ',' << r.spacing_mm;
      for (const auto& p : r.recist.endpoints()) {
         out << ',' << p.x << ',' << p.y;
      }
      out << ',' << (r.mask_path ? r.mask_path->generic_string() : std::string{}) << ',' << r.split << ','
          << r.patient_id << '\n';
   }
}

CtSlice load_record_slice(const DatasetIndex& index, const DatasetRecord& record)
{
   auto slice = load_slice(index.resolve(record.image_path), record.spacing_mm);
   slice.id = record.id;
   return slice;
}

std::optional<BinaryMask> load_record_mask(const DatasetIndex& index, const DatasetRecord& record)
{
   if (!record.mask_path) {
      return std::nullopt;
   }
   return load_mask(index.resolve(*record.mask_path));
}

void validate_record(const DatasetIndex& index, const DatasetRecord& record)
{
   auto fail = [&record](const std::string& why) {
      throw std::invalid_argument("record " + record.id + ": " + why);
   };
   if (!(record.spacing_mm > 0.0)) {
      fail("spacing must be positive");
   }
   const auto image = index.resolve(record.image_path);
   if (!fs::exists(image)) {
      fail("missing image " + image.string());
   }
   const auto slice = load_record_slice(index, record);
   for (const auto& p : record.recist.endpoints()) {
      if (!point_in_image(p, slice.height(), slice.width())) {
         fail("endpoint outside slice");
      }
   }
   if (record.mask_path) {
      if (!fs::exists(index.resolve(*record.mask_path))) {
         fail("missing mask");
      }
      const auto mask = *load_record_mask(index, record);
      if (!mask.same_shape(slice.pixels)) {
         fail("mask shape differs from slice");
      }
      if (count_foreground(mask) == 0) {
         fail("empty mask");
      }
   }
}

bool splits_patient_disjoint(const DatasetIndex& index)
{
   std::map<std::string, std::string> seen;
   for (const auto& r : index.records) {
      if (r.patient_id.empty()) {
         continue;
      }
      auto [it, inserted] = seen.emplace(r.patient_id, r.split);
      if (!inserted && it->second != r.split) {
         return false;
      }
   }
   return true;
}

void split_by_patient(DatasetIndex& index, double train_fraction, std::uint64_t seed)
{
   std::vector<std::string> patients;
   std::set<std::string> known;
   auto key = [](const DatasetRecord& r) { return r.patient_id.empty() ? "record:" + r.id : r.patient_id; };
   for (const auto& r : index.records) {
      if (known.insert(key(r)).second) {
         patients.push_back(key(r));
      }
   }
   std::mt19937_64 rng(seed);
   std::shuffle(patients.begin(), patients.end(), rng);
   const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(patients.size())));
   std::set<std::string> train(patients.begin(), patients.begin() + std::min(n_train, patients.size()));
   for (auto& r : index.records) {
      r.split = train.contains(key(r)) ? "train" : "test";
   }
}

} // namespace pdnet
