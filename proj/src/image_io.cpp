#include "attnseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <stdexcept>

namespace attnseg {

Tensor load_image_rgb(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot read image: " + path);
  Tensor t({img.rows, img.cols, 3});
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x) {
      // BGR -> RGB
      t.at(y, x, 0) = row[x][2] / 255.0;
      t.at(y, x, 1) = row[x][1] / 255.0;
      t.at(y, x, 2) = row[x][0] / 255.0;
    }
  }
  return t;
}

Tensor load_mask(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read mask: " + path);
  Tensor t({m.rows, m.cols, 1});
  for (int y = 0; y < m.rows; ++y) {
    const uint8_t* row = m.ptr<uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (row[x] != 0 && row[x] != 255)
        throw std::runtime_error("mask is not binary (found value " + std::to_string(row[x]) +
                                 "): " + path);
      t.at(y, x, 0) = row[x] == 255 ? 1.0 : 0.0;
    }
  }
  return t;
}

void save_image_rgb(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.c() != 3)
    throw std::invalid_argument("save_image_rgb: expected HxWx3, got " + image.shape_str());
  cv::Mat img(image.h(), image.w(), CV_8UC3);
  for (int y = 0; y < image.h(); ++y) {
    cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.w(); ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = image.at(y, x, c);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        row[x][2 - c] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  if (!cv::imwrite(path, img)) throw std::runtime_error("cannot write image: " + path);
}

void save_mask(const std::string& path, const Tensor& mask) {
  cv::Mat m(mask.h(), mask.w(), CV_8UC1);
  for (int y = 0; y < mask.h(); ++y) {
    uint8_t* row = m.ptr<uint8_t>(y);
    for (int x = 0; x < mask.w(); ++x) row[x] = mask.at(y, x, 0) != 0.0 ? 255 : 0;
  }
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write mask: " + path);
}

Tensor resize_image(const Tensor& image, int height, int width) {
  if (image.h() == height && image.w() == width) return image;
  cv::Mat src(image.h(), image.w(), CV_64FC3, const_cast<Scalar*>(image.v.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  Tensor t({height, width, 3});
  std::memcpy(t.v.data(), dst.ptr<double>(), t.v.size() * sizeof(Scalar));
  return t;
}

Tensor resize_image(const Tensor& image, int size) { return resize_image(image, size, size); }

Tensor resize_mask_nearest(const Tensor& mask, int height, int width) {
  if (mask.h() == height && mask.w() == width) return mask;
  cv::Mat src(mask.h(), mask.w(), CV_64FC1, const_cast<Scalar*>(mask.v.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  Tensor t({height, width, 1});
  std::memcpy(t.v.data(), dst.ptr<double>(), t.v.size() * sizeof(Scalar));
  return t;
}

Tensor resize_mask_nearest(const Tensor& mask, int size) {
  return resize_mask_nearest(mask, size, size);
}

Tensor render_overlay(const Tensor& image, const Tensor& mask) {
  if (image.h() != mask.h() || image.w() != mask.w())
    throw std::invalid_argument("overlay: image " + image.shape_str() + " vs mask " +
                                mask.shape_str());
  // fixed highlight: red at 0.5 alpha
  const Scalar hl[3] = {1.0, 0.1, 0.1};
  Tensor out = image;
  for (int y = 0; y < image.h(); ++y)
    for (int x = 0; x < image.w(); ++x)
      if (mask.at(y, x, 0) != 0.0)
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.5 * image.at(y, x, c) + 0.5 * hl[c];
  return out;
}

}  // namespace attnseg
