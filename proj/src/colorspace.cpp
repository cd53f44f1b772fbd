#include "rtn/colorspace.hpp"

namespace rtn::color {

void rgb_to_lab_buffer(const double* rgb, double* lab, int64_t n_pixels) {
  for (int64_t i = 0; i < n_pixels; ++i) rgb_to_lab_pixel(rgb + 3 * i, lab + 3 * i);
}

void lab_to_rgb_buffer(const double* lab, double* rgb, int64_t n_pixels) {
  for (int64_t i = 0; i < n_pixels; ++i) lab_to_rgb_pixel(lab + 3 * i, rgb + 3 * i);
}

}  // namespace rtn::color
