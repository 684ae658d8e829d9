#include "cfbench/volume.hpp"

namespace cfbench {

Volume3D avg_pool2(const Volume3D& v) {
  const Dims d = v.dims();
  if (d.x % 2 || d.y % 2 || d.z % 2) throw ShapeMismatch("avg_pool2: odd dims");
  Volume3D out({d.x / 2, d.y / 2, d.z / 2});
  for (int i = 0; i < d.x / 2; ++i)
    for (int j = 0; j < d.y / 2; ++j)
      for (int k = 0; k < d.z / 2; ++k) {
        double s = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) s += v.at(2 * i + a, 2 * j + b, 2 * k + c);
        out.at(i, j, k) = float(s / 8.0);
      }
  return out;
}

Volume3D avg_pool_to(const Volume3D& v, Dims target) {
  Volume3D cur = v;
  while (cur.dims() != target) {
    if (cur.dims().x < target.x) throw ShapeMismatch("avg_pool_to: target larger than input");
    cur = avg_pool2(cur);
  }
  return cur;
}

Volume3D upsample2_nearest(const Volume3D& v) {
  const Dims d = v.dims();
  Volume3D out({d.x * 2, d.y * 2, d.z * 2});
  for (int i = 0; i < d.x * 2; ++i)
    for (int j = 0; j < d.y * 2; ++j)
      for (int k = 0; k < d.z * 2; ++k)
        out.at(i, j, k) = v.at(i / 2, j / 2, k / 2);
  return out;
}

Volume3D crop(const Volume3D& v, int ox, int oy, int oz, Dims extent) {
  const Dims d = v.dims();
  if (ox < 0 || oy < 0 || oz < 0 || ox + extent.x > d.x || oy + extent.y > d.y ||
      oz + extent.z > d.z)
    throw ShapeMismatch("crop out of bounds");
  Volume3D out(extent);
  for (int i = 0; i < extent.x; ++i)
    for (int j = 0; j < extent.y; ++j)
      for (int k = 0; k < extent.z; ++k) out.at(i, j, k) = v.at(ox + i, oy + j, oz + k);
  return out;
}

}  // namespace cfbench
