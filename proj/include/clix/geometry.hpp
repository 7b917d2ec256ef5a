#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace clix {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Oriented 3D box, gravity aligned: yaw rotates counterclockwise about +z
// viewed from above. Extents dx,dy,dz are full lengths along the box axes.
struct Box3D {
  double cx = 0.0;
  double cy = 0.0;
  double cz = 0.0;
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;
  double theta = 0.0;  // radians in [-pi, pi)
  int class_id = 0;
};

struct ClassSet {
  std::vector<std::string> names;

  static ClassSet standard();  // {"Car", "Pedestrian", "Cyclist"}
  int index_of(const std::string& name) const;  // -1 if unknown
  int size() const { return static_cast<int>(names.size()); }
};

// Wraps an angle into [-pi, pi).
double normalize_angle(double theta);

bool box_valid(const Box3D& b);

// Corner order: indices 0..3 are the bottom face (z = cz - dz/2), 4..7 the
// top face, each counterclockwise in the box frame starting at (+dx/2, +dy/2).
std::array<Vec3, 8> box_corners(const Box3D& b);

// BEV footprint, counterclockwise, starting at (+dx/2, +dy/2) in box frame.
std::array<Vec2, 4> box_bev_corners(const Box3D& b);

// Least-squares free reconstruction of a box from its 8 corners in the order
// produced by box_corners. Yaw recovered modulo pi.
Box3D box_from_corners(const std::array<Vec3, 8>& corners, int class_id = 0);

double bev_area(const Box3D& b);
double box_volume(const Box3D& b);

// Intersection area of the two rotated BEV rectangles (convex clipping).
double bev_intersection_area(const Box3D& a, const Box3D& b);

// Throws std::invalid_argument on degenerate (zero-area/volume) boxes.
double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

bool point_in_box(const Vec3& p, const Box3D& b);

// Greedy BEV NMS by descending score, ties broken by lower index.
// Returns kept indices in suppression order.
std::vector<int> nms_bev(const std::vector<Box3D>& boxes,
                         const std::vector<double>& scores,
                         double iou_thresh);

}  // namespace clix
