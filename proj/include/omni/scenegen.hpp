// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omni/tensor.hpp"

namespace omni::scene {

inline const std::array<std::string, 4> kTasks = {"depth", "hed", "scribble", "animal_pose"};
int task_index(const std::string& task);  // throws on unknown task

struct Color {
    std::string name;
    std::uint8_t r, g, b;
};
const std::vector<Color>& palette();
/// Indices into palette() usable as backgrounds.
const std::vector<int>& background_colors();

enum class ShapeKind { Circle, Rectangle, Triangle };
const char* shape_name(ShapeKind k);

struct Primitive {
    ShapeKind kind = ShapeKind::Circle;
    double cx = 0, cy = 0;  // pixel units
    double size = 1;        // half-extent
    double depth = 1;       // (0,1], larger is nearer
    int color = 0;
    bool contains(double px, double py) const;
};

enum class PoseKind { Standing, Walking, Jumping };
const char* pose_name(PoseKind k);

/// Keypoints: head, left hip, right hip, left foot, right foot.
struct Skeleton {
    std::array<std::array<double, 2>, 5> joints{};
    PoseKind pose = PoseKind::Standing;
    int color = 0;
};
/// Bones as keypoint index pairs.
const std::vector<std::array<int, 2>>& bones();

struct SceneSpec {
    int canvas = 64;
    std::vector<Primitive> prims;
    std::optional<Skeleton> skeleton;
    int background = 0;
    std::uint64_t seed = 0;
};

SceneSpec random_shapes_spec(int canvas, std::uint64_t seed);
SceneSpec random_pose_spec(int canvas, std::uint64_t seed);

Tensor render_scene(const SceneSpec& spec);                   // [3,S,S]
Tensor derive_depth(const SceneSpec& spec);                   // [1,S,S]
Tensor grayscale(const Tensor& image);                        // [1,S,S]
Tensor derive_edges(const Tensor& image);                     // [1,S,S]
Tensor derive_scribble(const Tensor& image);                  // [1,S,S] binary
Tensor derive_pose(const SceneSpec& spec);                    // [1,S,S] binary
std::string caption(const SceneSpec& spec);

/// Pixels of a Bresenham segment between integer endpoints.
std::vector<std::array<int, 2>> bresenham(int x0, int y0, int x1, int y1);

struct Sample {
    Tensor image;  // [3,S,S]
    std::string caption;
    std::map<std::string, Tensor> conditions;
    std::vector<std::string> task_mask;
    std::uint64_t seed = 0;
    int source = 0;  // index of the unique scene this entry replicates
    bool has(const std::string& task) const { return conditions.count(task) > 0; }
};

Sample make_sample(const SceneSpec& spec, int source);

struct Corpus {
    std::vector<Sample> unique;  // n_shapes shape scenes then n_pose pose scenes
    std::vector<int> order;      // balanced view: indices into unique
    std::size_t size() const { return order.size(); }
    const Sample& operator[](std::size_t i) const { return unique[static_cast<std::size_t>(order[i])]; }
};

/// Pose scenes are replicated until both parts have equal size (when n_pose
/// does not divide n_shapes the first remainder of them get one extra copy).
/// With balance off, every scene appears once.
Corpus generate_corpus(std::uint64_t seed, int n_shapes, int n_pose, int canvas = 64, bool balance = true);

/// Directory per unique scene plus index.txt in balanced order.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace omni::scene
