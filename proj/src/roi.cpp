#include "liaf/roi.hpp"

#include <string>

namespace liaf {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

ScaledBox clip_and_scale_box(const Box& image_box, int stride, Index height, Index width, double min_area) {
  if (stride < 1) throw std::invalid_argument("clip_and_scale_box: stride must be >= 1");
  if (!(image_box.x2 > image_box.x1 && image_box.y2 > image_box.y1))
    throw std::invalid_argument("clip_and_scale_box: box has non-positive area");
  const double s = stride;
  Box b{image_box.x1 / s, image_box.y1 / s, image_box.x2 / s, image_box.y2 / s};
  const auto W = static_cast<double>(width);
  const auto H = static_cast<double>(height);
  if (b.x2 <= 0 || b.y2 <= 0 || b.x1 >= W || b.y1 >= H)
    throw std::invalid_argument("clip_and_scale_box: box entirely outside the feature map");
  b.x1 = std::clamp(b.x1, 0.0, W);
  b.x2 = std::clamp(b.x2, 0.0, W);
  b.y1 = std::clamp(b.y1, 0.0, H);
  b.y2 = std::clamp(b.y2, 0.0, H);
  return ScaledBox{b, b.area() < min_area};
}

void InstanceSet::validate(Index n, Index height, Index width) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const auto& b = it.box;
    if (it.batch_index < 0 || it.batch_index >= n)
      throw std::invalid_argument("InstanceSet: batch index out of range at " + std::to_string(i));
    if (!(b.x1 >= 0 && b.y1 >= 0 && b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= static_cast<double>(width) &&
          b.y2 <= static_cast<double>(height)))
      throw std::invalid_argument("InstanceSet: box out of bounds at " + std::to_string(i));
  }
}

}  // namespace liaf
