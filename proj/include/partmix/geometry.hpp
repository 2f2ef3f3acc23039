#pragma once

#include <compare>

namespace partmix {

// Position on a feature grid, in cells. x is the column, y the row.
struct Cell {
  int x = 0;
  int y = 0;

  friend constexpr Cell operator+(Cell a, Cell b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Cell operator-(Cell a, Cell b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr auto operator<=>(const Cell&, const Cell&) = default;
};

// Axis-aligned pixel rectangle; (x, y) is the top-left corner.
struct Rect {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

}  // namespace partmix
