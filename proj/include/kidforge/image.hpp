#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "kidforge/common.hpp"
#include "kidforge/features.hpp"

namespace kidforge {

inline constexpr Eigen::Index kImageFeatureDim = 512 + 6;
inline constexpr int kFeaturizerSide = 64;

// Identifies the codec stack producing compression views. Recorded in KID
// metadata because different JPEG builds quantize slightly differently.
inline std::string codec_id() { return std::string("opencv-") + CV_VERSION + "-jpeg"; }

// 518-dim appearance descriptor:
//   [0..511]   joint RGB histogram, 8 bins per channel (bin = value >> 5),
//              flat index (r*8 + g)*8 + b, L1-normalized.
//   [512..517] per-channel mean r,g,b then std r,g,b, scaled into [0,1].
// Input is resized to 64x64 bilinear first; a 64x64 input passes through
// untouched so the resize can never perturb exact pixel values.
inline FeatureVector featurize_mat(const cv::Mat& input) {
    if (input.empty()) fail(ErrorKind::codec, "featurize: empty image");
    cv::Mat bgr;
    if (input.channels() == 3)
        bgr = input;
    else if (input.channels() == 1)
        cv::cvtColor(input, bgr, cv::COLOR_GRAY2BGR);
    else if (input.channels() == 4)
        cv::cvtColor(input, bgr, cv::COLOR_BGRA2BGR);
    else
        fail(ErrorKind::codec, "featurize: unsupported channel count");
    if (bgr.depth() != CV_8U) fail(ErrorKind::codec, "featurize: expected 8-bit image");

    cv::Mat tile;
    if (bgr.rows == kFeaturizerSide && bgr.cols == kFeaturizerSide)
        tile = bgr;
    else
        cv::resize(bgr, tile, cv::Size(kFeaturizerSide, kFeaturizerSide), 0, 0, cv::INTER_LINEAR);

    FeatureVector out = FeatureVector::Zero(kImageFeatureDim);
    double sum[3] = {0, 0, 0};
    double sumsq[3] = {0, 0, 0};
    const int n = kFeaturizerSide * kFeaturizerSide;
    for (int y = 0; y < kFeaturizerSide; ++y) {
        const cv::Vec3b* row = tile.ptr<cv::Vec3b>(y);
        for (int x = 0; x < kFeaturizerSide; ++x) {
            int b = row[x][0], g = row[x][1], r = row[x][2];
            int bin = ((r >> 5) * 8 + (g >> 5)) * 8 + (b >> 5);
            out[bin] += 1.0;
            sum[0] += r;
            sum[1] += g;
            sum[2] += b;
            sumsq[0] += double(r) * r;
            sumsq[1] += double(g) * g;
            sumsq[2] += double(b) * b;
        }
    }
    for (int i = 0; i < 512; ++i) out[i] /= n;
    for (int c = 0; c < 3; ++c) {
        double mean = sum[c] / n;
        double var = sumsq[c] / n - mean * mean;
        if (var < 0) var = 0;
        out[512 + c] = mean / 255.0;
        // Max possible std of an 8-bit channel is 127.5 (half at 0, half at
        // 255), so /127.5 maps into [0,1].
        out[515 + c] = std::sqrt(var) / 127.5;
    }
    return out;
}

inline cv::Mat decode_image(const std::vector<unsigned char>& bytes) {
    if (bytes.empty()) fail(ErrorKind::codec, "decode: empty byte buffer");
    cv::Mat m = cv::imdecode(bytes, cv::IMREAD_COLOR);
    if (m.empty()) fail(ErrorKind::codec, "decode: unrecognized or corrupt image data");
    return m;
}

inline FeatureVector featurize_image(const std::vector<unsigned char>& bytes) {
    return featurize_mat(decode_image(bytes));
}

inline std::vector<unsigned char> encode_jpeg(const cv::Mat& image, int quality_factor) {
    if (quality_factor < 1 || quality_factor > 100)
        fail(ErrorKind::config, "JPEG quality factor must be in [1,100], got " +
                                    std::to_string(quality_factor));
    std::vector<unsigned char> out;
    if (!cv::imencode(".jpg", image, out, {cv::IMWRITE_JPEG_QUALITY, quality_factor}))
        fail(ErrorKind::codec, "JPEG encode failed");
    return out;
}

inline std::vector<unsigned char> encode_png(const cv::Mat& image) {
    std::vector<unsigned char> out;
    if (!cv::imencode(".png", image, out)) fail(ErrorKind::codec, "PNG encode failed");
    return out;
}

// Compression happens at prediction time only: the stored image is never
// touched, each view is featurized from a fresh re-encode of the decoded
// pixels at the given quality factor.
inline FeatureVector featurize_compressed(const cv::Mat& image, int quality_factor) {
    return featurize_mat(decode_image(encode_jpeg(image, quality_factor)));
}

inline ViewSet compression_views(const cv::Mat& image, const std::vector<int>& quality_factors) {
    ViewSet vs;
    vs.views.push_back(featurize_mat(image));
    for (int qf : quality_factors) {
        vs.views.push_back(featurize_compressed(image, qf));
        vs.quality_factors.push_back(qf);
    }
    return vs;
}

inline ViewSet compression_views(const std::vector<unsigned char>& bytes,
                                 const std::vector<int>& quality_factors) {
    return compression_views(decode_image(bytes), quality_factors);
}

// ---------------------------------------------------------------------------
// Image-backed feature sources. Featurization dominates runtime, so every
// (sample, quality) pair is computed once and cached.

class ImageFeatureSourceBase : public FeatureSource {
  public:
    FeatureVector features(const std::string& dataset_id, const SampleRecord& sample) override {
        return cached(dataset_id, sample, 0);
    }

    ViewSet views(const std::string& dataset_id, const SampleRecord& sample,
                  const std::vector<int>& quality_factors) override {
        ViewSet vs;
        vs.views.push_back(cached(dataset_id, sample, 0));
        for (int qf : quality_factors) {
            vs.views.push_back(cached(dataset_id, sample, qf));
            vs.quality_factors.push_back(qf);
        }
        return vs;
    }

    Eigen::Index dimension() const override { return kImageFeatureDim; }
    bool supports_compression() const override { return true; }

  protected:
    virtual cv::Mat load_mat(const std::string& dataset_id, const SampleRecord& sample) = 0;

  private:
    FeatureVector cached(const std::string& dataset_id, const SampleRecord& sample, int qf) {
        std::string key = dataset_id + "\x1f" + sample.sample_id + "\x1f" + std::to_string(qf);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        cv::Mat m = load_mat(dataset_id, sample);
        FeatureVector v = qf == 0 ? featurize_mat(m) : featurize_compressed(m, qf);
        std::lock_guard<std::mutex> lock(mutex_);
        return cache_.emplace(std::move(key), std::move(v)).first->second;
    }

    std::mutex mutex_;
    std::unordered_map<std::string, FeatureVector> cache_;
};

// Loads sample.image relative to a base directory.
class DiskImageSource : public ImageFeatureSourceBase {
  public:
    explicit DiskImageSource(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) {}

  protected:
    cv::Mat load_mat(const std::string& dataset_id, const SampleRecord& sample) override {
        if (!sample.image)
            fail(ErrorKind::coverage,
                 "sample '" + dataset_id + "/" + sample.sample_id + "' has no image");
        std::filesystem::path p = base_dir_ / *sample.image;
        cv::Mat m = cv::imread(p.string(), cv::IMREAD_COLOR);
        if (m.empty()) fail(ErrorKind::io, "cannot read image " + p.string());
        return m;
    }

  private:
    std::filesystem::path base_dir_;
};

// Holds rendered images in memory; used by the synthetic benchmarks.
class MemoryImageSource : public ImageFeatureSourceBase {
  public:
    void add(const std::string& dataset_id, const std::string& sample_id, cv::Mat image) {
        images_[dataset_id + "/" + sample_id] = std::move(image);
    }

    bool has(const std::string& dataset_id, const std::string& sample_id) const {
        return images_.count(dataset_id + "/" + sample_id) > 0;
    }

    const cv::Mat& mat(const std::string& dataset_id, const std::string& sample_id) const {
        auto it = images_.find(dataset_id + "/" + sample_id);
        if (it == images_.end())
            fail(ErrorKind::coverage, "no image held for sample '" + dataset_id + "/" + sample_id + "'");
        return it->second;
    }

  protected:
    cv::Mat load_mat(const std::string& dataset_id, const SampleRecord& sample) override {
        auto it = images_.find(dataset_id + "/" + sample.sample_id);
        if (it == images_.end())
            fail(ErrorKind::coverage,
                 "no image held for sample '" + dataset_id + "/" + sample.sample_id + "'");
        return it->second;
    }

  private:
    std::map<std::string, cv::Mat> images_;
};

}  // namespace kidforge
