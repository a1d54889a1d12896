#pragma once

#include <string>

#include "attnseg/tensor.hpp"

namespace attnseg {

/// 8-bit RGB file -> H x W x 3 tensor in [0, 1].
Tensor load_image_rgb(const std::string& path);

/// Single-channel mask file with values {0, 255} -> H x W x 1 tensor of {0, 1}.
Tensor load_mask(const std::string& path);

void save_image_rgb(const std::string& path, const Tensor& image);
void save_mask(const std::string& path, const Tensor& mask);

Tensor resize_image(const Tensor& image, int size);  // bilinear, square target
Tensor resize_image(const Tensor& image, int height, int width);
Tensor resize_mask_nearest(const Tensor& mask, int size);  // keeps {0,1}
Tensor resize_mask_nearest(const Tensor& mask, int height, int width);

/// Mask alpha-blended over the image with a fixed highlight color (0.5 alpha).
Tensor render_overlay(const Tensor& image, const Tensor& mask);

}  // namespace attnseg
