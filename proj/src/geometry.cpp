#include "clix/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace clix {

namespace {

constexpr double kClipEps = 1e-9;  // collinear/degenerate clip tolerance, meters
constexpr double kPi = 3.14159265358979323846;

double cross2(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    s += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::fabs(s);
}

// Sutherland-Hodgman step: keep the part of poly on the left of edge e0->e1.
std::vector<Vec2> clip_against_edge(const std::vector<Vec2>& poly, const Vec2& e0,
                                    const Vec2& e1) {
  std::vector<Vec2> out;
  out.reserve(poly.size() + 1);
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    const double dc = cross2(e0, e1, cur);
    const double dn = cross2(e0, e1, nxt);
    const bool cur_in = dc >= -kClipEps;
    const bool nxt_in = dn >= -kClipEps;
    if (cur_in) out.push_back(cur);
    if (cur_in != nxt_in) {
      const double t = dc / (dc - dn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

}  // namespace

ClassSet ClassSet::standard() { return ClassSet{{"Car", "Pedestrian", "Cyclist"}}; }

int ClassSet::index_of(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

double normalize_angle(double theta) {
  double t = std::fmod(theta + kPi, 2.0 * kPi);
  if (t < 0) t += 2.0 * kPi;
  return t - kPi;
}

bool box_valid(const Box3D& b) {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.cz) &&
         std::isfinite(b.theta) && b.dx > 0 && b.dy > 0 && b.dz > 0;
}

std::array<Vec2, 4> box_bev_corners(const Box3D& b) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double hx = 0.5 * b.dx;
  const double hy = 0.5 * b.dy;
  const double lx[4] = {hx, -hx, -hx, hx};
  const double ly[4] = {hy, hy, -hy, -hy};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i) {
    out[i].x = b.cx + c * lx[i] - s * ly[i];
    out[i].y = b.cy + s * lx[i] + c * ly[i];
  }
  return out;
}

std::array<Vec3, 8> box_corners(const Box3D& b) {
  const std::array<Vec2, 4> bev = box_bev_corners(b);
  const double zlo = b.cz - 0.5 * b.dz;
  const double zhi = b.cz + 0.5 * b.dz;
  std::array<Vec3, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {bev[i].x, bev[i].y, zlo};
    out[i + 4] = {bev[i].x, bev[i].y, zhi};
  }
  return out;
}

Box3D box_from_corners(const std::array<Vec3, 8>& corners, int class_id) {
  Box3D b;
  b.class_id = class_id;
  double sx = 0, sy = 0, sz = 0;
  for (const Vec3& c : corners) {
    sx += c.x;
    sy += c.y;
    sz += c.z;
  }
  b.cx = sx / 8.0;
  b.cy = sy / 8.0;
  b.cz = sz / 8.0;
  double zmin = corners[0].z, zmax = corners[0].z;
  for (const Vec3& c : corners) {
    zmin = std::min(zmin, c.z);
    zmax = std::max(zmax, c.z);
  }
  b.dz = zmax - zmin;
  // c0=(+hx,+hy), c1=(-hx,+hy): c0-c1 is the box +x direction scaled by dx.
  const double ex = corners[0].x - corners[1].x;
  const double ey = corners[0].y - corners[1].y;
  b.dx = std::hypot(ex, ey);
  const double fx = corners[1].x - corners[2].x;
  const double fy = corners[1].y - corners[2].y;
  b.dy = std::hypot(fx, fy);
  b.theta = normalize_angle(std::atan2(ey, ex));
  return b;
}

double bev_area(const Box3D& b) { return b.dx * b.dy; }

double box_volume(const Box3D& b) { return b.dx * b.dy * b.dz; }

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  // Quick reject: center distance beyond the sum of circumradii.
  const double ra = 0.5 * std::hypot(a.dx, a.dy);
  const double rb = 0.5 * std::hypot(b.dx, b.dy);
  const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);
  if (d > ra + rb) return 0.0;

  const std::array<Vec2, 4> pa = box_bev_corners(a);
  const std::array<Vec2, 4> pb = box_bev_corners(b);
  std::vector<Vec2> poly(pa.begin(), pa.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_against_edge(poly, pb[i], pb[(i + 1) % 4]);
  }
  return polygon_area(poly);
}

namespace {

void require_nondegenerate(const Box3D& a, const Box3D& b, bool need_z) {
  const bool bad_a = !(a.dx > kClipEps && a.dy > kClipEps && (!need_z || a.dz > kClipEps));
  const bool bad_b = !(b.dx > kClipEps && b.dy > kClipEps && (!need_z || b.dz > kClipEps));
  if (bad_a || bad_b)
    throw std::invalid_argument("iou: degenerate zero-area box");
}

}  // namespace

double iou_bev(const Box3D& a, const Box3D& b) {
  require_nondegenerate(a, b, false);
  const double inter = bev_intersection_area(a, b);
  const double uni = bev_area(a) + bev_area(b) - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  require_nondegenerate(a, b, true);
  const double zlo = std::max(a.cz - 0.5 * a.dz, b.cz - 0.5 * b.dz);
  const double zhi = std::min(a.cz + 0.5 * a.dz, b.cz + 0.5 * b.dz);
  const double h = zhi - zlo;
  if (h <= 0) return 0.0;
  const double inter = bev_intersection_area(a, b) * h;
  const double uni = box_volume(a) + box_volume(b) - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool point_in_box(const Vec3& p, const Box3D& b) {
  if (std::fabs(p.z - b.cz) > 0.5 * b.dz) return false;
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double px = p.x - b.cx;
  const double py = p.y - b.cy;
  // Inverse rotation into the box frame.
  const double lx = c * px + s * py;
  const double ly = -s * px + c * py;
  return std::fabs(lx) <= 0.5 * b.dx && std::fabs(ly) <= 0.5 * b.dy;
}

std::vector<int> nms_bev(const std::vector<Box3D>& boxes,
                         const std::vector<double>& scores, double iou_thresh) {
  if (boxes.size() != scores.size())
    throw std::invalid_argument("nms_bev: boxes and scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (scores[i] != scores[j]) return scores[i] > scores[j];
    return i < j;
  });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<int> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (suppressed[j]) continue;
      if (iou_bev(boxes[i], boxes[j]) > iou_thresh) suppressed[j] = 1;
    }
  }
  return kept;
}

}  // namespace clix
