#pragma once

// Pixel-loop reference for IoU, F1 and connected components.

#include <cstdint>
#include <algorithm>
#include <queue>
#include <utility>
#include <vector>

namespace oracle {

// IoU of class c: |pred==c and truth==c| / |pred==c or truth==c|, 1 when the union is empty.
inline double class_iou(const std::vector<std::int64_t>& pred, const std::vector<std::int64_t>& truth, int c) {
    std::int64_t inter = 0;
    std::int64_t uni = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
        const bool a = pred[p] == c;
        const bool b = truth[p] == c;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_iou(const std::vector<std::int64_t>& pred, const std::vector<std::int64_t>& truth, int classes) {
    double s = 0.0;
    for (int c = 0; c < classes; ++c) {
        s += class_iou(pred, truth, c);
    }
    return s / classes;
}

// F1 and IoU of class c from raw counts; (0, 0) when class c never occurs.
inline std::pair<double, double> f1_and_iou(const std::vector<std::int64_t>& pred,
                                            const std::vector<std::int64_t>& truth, int c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
        if (pred[p] == c && truth[p] == c) {
            tp += 1;
        } else if (pred[p] == c) {
            fp += 1;
        } else if (truth[p] == c) {
            fn += 1;
        }
    }
    if (tp + fp + fn == 0) {
        return {0.0, 0.0};
    }
    return {2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)};
}

// Labels 4-connected components of pixels equal to `value` in a row-major
// h x w grid: 0 elsewhere, 1..K inside components in scan order.
inline std::vector<int> component_labels(const std::vector<std::int64_t>& grid, int h, int w, std::int64_t value) {
    std::vector<int> label(grid.size(), 0);
    int count = 0;
    for (int start = 0; start < h * w; ++start) {
        if (grid[start] != value || label[start] != 0) {
            continue;
        }
        ++count;
        std::queue<int> frontier;
        frontier.push(start);
        label[start] = count;
        while (!frontier.empty()) {
            const int p = frontier.front();
            frontier.pop();
            const int y = p / w;
            const int x = p % w;
            const int ny[4] = {y - 1, y + 1, y, y};
            const int nx[4] = {x, x, x - 1, x + 1};
            for (int d = 0; d < 4; ++d) {
                if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) {
                    continue;
                }
                const int q = ny[d] * w + nx[d];
                if (label[q] == 0 && grid[q] == value) {
                    label[q] = count;
                    frontier.push(q);
                }
            }
        }
    }
    return label;
}

inline int connected_components(const std::vector<std::int64_t>& grid, int h, int w, std::int64_t value) {
    const auto label = component_labels(grid, h, w, value);
    return label.empty() ? 0 : *std::max_element(label.begin(), label.end());
}

} // namespace oracle
