// SPDX-License-Identifier: Apache-2.0
#pragma once
// Learns one task-token embedding row against the frozen base denoiser.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "omni/denoiser.hpp"

namespace omni::inversion {

inline constexpr std::size_t kExemplars = 16;

/// "an image of ⟨task⟩"
std::string inversion_prompt(const std::string& task);

struct InversionJob {
    std::string task;
    std::vector<Tensor> exemplars;  // [3,S,S]
    std::size_t exemplar_count = kExemplars;
    long steps = 2000;
    double lr = 5e-3;
    int batch = 4;
    std::uint64_t seed = 0;
};

struct InversionResult {
    int token_id = -1;
    std::vector<double> v;
    std::vector<double> losses;
};

/// Optimizes only the row of ⟨task⟩; the base must be fully frozen and the
/// token registered. The row is frozen again on return.
InversionResult learn_embedding(stage2::BaseModel& base, const InversionJob& job);

/// Mean diffusion loss over a fixed probe grid (t in {100,...,900}, seeded
/// noise per holdout) with v swapped into the token row. The row is restored.
double inversion_quality(stage2::BaseModel& base, const std::string& task, std::span<const double> v,
                         const std::vector<Tensor>& holdouts);

/// token_<task>.bin (little-endian float64) and token_<task>.txt.
void save_token(const std::filesystem::path& dir, const std::string& task, int token_id, std::span<const double> v,
                std::uint64_t seed, long steps);
std::vector<double> load_token(const std::filesystem::path& dir, const std::string& task);

}  // namespace omni::inversion
