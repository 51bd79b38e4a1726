// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "omni/nn.hpp"

namespace omni::text {

constexpr int kContext = 32;
constexpr int kDText = 64;
constexpr int kHeads = 4;
constexpr int kBlocks = 2;
constexpr int kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

/// "depth" -> "⟨depth⟩"
std::string task_token(const std::string& name);

class Vocabulary {
public:
    /// Specials followed by the closed caption vocabulary.
    Vocabulary();
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& token) const { return ids_.count(token) > 0; }
    /// UNK for unknown tokens.
    int id(const std::string& token) const;
    const std::string& token(int id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }
    /// Idempotent: an existing token keeps its id.
    int add(const std::string& token);

    void save(const std::filesystem::path& file) const;
    static Vocabulary load(const std::filesystem::path& file);

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

/// Lowercased whitespace split; "," splits off as its own token and ASCII
/// <name> is read as ⟨name⟩. Never fails: overlong prompts are truncated
/// with a warning on stderr.
std::vector<std::string> split_words(const std::string& prompt);
std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt, bool* truncated = nullptr);
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

/// "Use ⟨task⟩ as a feature, " + prompt. The task token must be registered.
std::string apply_prefix(const Vocabulary& vocab, const std::string& task, const std::string& prompt);

struct TextEmbedding {
    Tensor matrix;                    // [B, L, d]
    Tensor pooled;                    // [B, d]
    std::vector<std::uint8_t> mask;   // [B*L], 1 for non-PAD
    int batch() const { return matrix.dim(0); }
};

/// Small pre-LN transformer over the vocabulary. Each vocabulary row is its
/// own parameter "<prefix>.embed.<id>", so a single row can be trained alone.
class TextEncoder {
public:
    TextEncoder(ParamStore& params, Vocabulary& vocab, Rng& rng, const std::string& prefix = "text");

    /// Registers ⟨name⟩ and appends its embedding row; returns the token id.
    int register_token(const std::string& name, Rng& rng);
    std::string row_name(int id) const { return prefix_ + ".embed." + std::to_string(id); }
    Tensor row(int id) const;

    TextEmbedding encode(const std::vector<std::vector<int>>& batch) const;
    TextEmbedding encode(const std::vector<int>& tokens) const { return encode(std::vector<std::vector<int>>{tokens}); }
    TextEmbedding encode_prompts(const std::vector<std::string>& prompts) const;

    const Vocabulary& vocab() const { return *vocab_; }
    const std::string& prefix() const { return prefix_; }

private:
    struct Block {
        LayerNorm ln1, ln2;
        Linear q, k, v, o, fc1, fc2;
    };

    ParamStore* params_;
    Vocabulary* vocab_;
    std::string prefix_;
    std::vector<Block> blocks_;
    LayerNorm final_ln_;
    Tensor positions_;  // [L, d], fixed
};

}  // namespace omni::text
