// SPDX-License-Identifier: Apache-2.0
#include "omni/inversion.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "omni/optim.hpp"

namespace fs = std::filesystem;

namespace omni::inversion {

std::string inversion_prompt(const std::string& task) { return "an image of " + text::task_token(task); }

namespace {

int token_id_of(const stage2::BaseModel& base, const std::string& task) {
    const std::string tok = text::task_token(task);
    if (!base.vocab().contains(tok)) throw ContractError("task token " + tok + " is not registered");
    return base.vocab().id(tok);
}

std::vector<Tensor> to_latents(const stage2::BaseModel& base, const std::vector<Tensor>& images) {
    NoGradGuard no_grad;
    const int lc = base.config().latent_channels, ls = base.config().canvas / 4;
    std::vector<Tensor> out;
    for (const Tensor& img : images) out.push_back(base.encode_images(stage2::stack({img})).reshape({lc, ls, ls}));
    return out;
}

text::TextEmbedding repeat(const text::TextEmbedding& e, int n) {
    return stage2::stack_embeddings(std::vector<const text::TextEmbedding*>(static_cast<std::size_t>(n), &e));
}

}  // namespace

InversionResult learn_embedding(stage2::BaseModel& base, const InversionJob& job) {
    if (base.params().count_scalars(true) != 0) throw ContractError("learn_embedding: base model has trainable parameters; freeze it first");
    require(job.exemplars.size() == job.exemplar_count,
            "learn_embedding: expected " + std::to_string(job.exemplar_count) + " exemplars, got " + std::to_string(job.exemplars.size()));
    require(!job.exemplars.empty() && job.batch >= 1, "learn_embedding: need exemplars and a positive batch");
    InversionResult res;
    res.token_id = token_id_of(base, job.task);
    const std::string row = base.text().row_name(res.token_id);
    const std::vector<Tensor> latents = to_latents(base, job.exemplars);
    const std::vector<int> ids = text::tokenize(base.vocab(), inversion_prompt(job.task));
    const NoiseSchedule& sched = base.schedule();
    ParamStore& ps = base.params();
    Rng rng = Rng(job.seed).fork(0x1a7);
    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    Tape& tape = Tape::current();
    ps.set_frozen(row, false);
    try {
        for (long step = 0; step < job.steps; ++step) {
            std::vector<Tensor> zs;
            std::vector<int> ts;
            for (int b = 0; b < job.batch; ++b) {
                zs.push_back(latents[rng.below(latents.size())]);
                ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T()))));
            }
            const Tensor z = stage2::stack(zs);
            const Tensor eps = Tensor::randn(z.shape(), rng);
            ps.zero_grad();
            const text::TextEmbedding c = repeat(base.text().encode(ids), job.batch);
            const Tensor loss = diffusion_loss(eps, base.predict_noise(add_noise(z, ts, eps, sched), ts, c));
            tape.backward(loss);
            res.losses.push_back(loss.item());
            tape.clear();
            opt.step(ps, job.lr);
        }
    } catch (...) {
        tape.clear();
        ps.set_frozen(row, true);
        throw;
    }
    ps.set_frozen(row, true);
    const Tensor v = ps.tensor(row);
    res.v.assign(v.values().begin(), v.values().end());
    return res;
}

double inversion_quality(stage2::BaseModel& base, const std::string& task, std::span<const double> v,
                         const std::vector<Tensor>& holdouts) {
    if (holdouts.empty()) throw ContractError("inversion_quality: empty holdout set");
    const int id = token_id_of(base, task);
    Tensor row = base.params().tensor(base.text().row_name(id));
    if (v.size() != row.numel()) throw ShapeError("inversion_quality: vector length " + std::to_string(v.size()) + " vs " + std::to_string(row.numel()));
    const std::vector<double> saved(row.values().begin(), row.values().end());
    std::copy(v.begin(), v.end(), row.mutable_values().begin());
    static constexpr int kGrid[] = {100, 300, 500, 700, 900};
    const std::vector<Tensor> latents = to_latents(base, holdouts);
    double total = 0;
    {
        NoGradGuard no_grad;
        const text::TextEmbedding c = base.text().encode(text::tokenize(base.vocab(), inversion_prompt(task)));
        const int n = static_cast<int>(std::size(kGrid));
        const text::TextEmbedding cb = repeat(c, n);
        const Rng probe(0x9b0be);
        for (std::size_t i = 0; i < latents.size(); ++i) {
            std::vector<Tensor> zs(static_cast<std::size_t>(n), latents[i]);
            const Tensor z = stage2::stack(zs);
            Rng r = probe.fork(i);
            const Tensor eps = Tensor::randn(z.shape(), r);
            const std::vector<int> ts(std::begin(kGrid), std::end(kGrid));
            total += diffusion_loss(eps, base.predict_noise(add_noise(z, ts, eps, base.schedule()), ts, cb)).item();
        }
    }
    std::copy(saved.begin(), saved.end(), row.mutable_values().begin());
    return total / static_cast<double>(latents.size());
}

void save_token(const fs::path& dir, const std::string& task, int token_id, std::span<const double> v, std::uint64_t seed,
                long steps) {
    static_assert(std::endian::native == std::endian::little, "token files are written in host byte order");
    fs::create_directories(dir);
    std::ofstream bin(dir / ("token_" + task + ".bin"), std::ios::binary);
    bin.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    std::ofstream txt(dir / ("token_" + task + ".txt"));
    txt << "token_id " << token_id << "\nd_text " << v.size() << "\nseed " << seed << "\nsteps " << steps << "\ndtype float64\n";
    if (!bin || !txt) throw ContractError("save_token: cannot write into " + dir.string());
}

std::vector<double> load_token(const fs::path& dir, const std::string& task) {
    const fs::path file = dir / ("token_" + task + ".bin");
    std::ifstream bin(file, std::ios::binary);
    if (!bin) throw ContractError("missing token file " + file.string());
    const auto size = fs::file_size(file);
    if (size % sizeof(double) != 0) throw ContractError("token file " + file.string() + " has a partial value");
    std::vector<double> v(size / sizeof(double));
    bin.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(size));
    return v;
}

}  // namespace omni::inversion
