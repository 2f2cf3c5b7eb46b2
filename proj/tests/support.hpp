#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "ravqa/model.hpp"
#include "ravqa/synthetic.hpp"
#include "ravqa/tensor.hpp"

namespace ravqa::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Tensor::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = u(rng);
    return t;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Zero biases and unit gains hide bugs; give every parameter a random value.
inline void randomize_params(ParamStore& ps, std::mt19937_64& rng, double scale = 0.3) {
    std::normal_distribution<double> nd(0.0, scale);
    for (auto& [name, p] : ps) {
        const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
        for (double& v : p.value.storage()) v = (gain ? 1.0 : 0.0) + nd(rng);
    }
}

inline ModelConfig tiny_model_config(std::size_t d = 8, std::size_t depth = 1, std::size_t heads = 2) {
    ModelConfig c;
    c.d_model = d;
    c.depth = depth;
    c.heads = heads;
    c.ffn_mult = 2;
    c.seq_len = 5;
    c.text_len = 3;
    c.audio_dim = 4;
    c.visual_dim = 3;
    c.text_dim = 2;
    c.router_hidden = 4;
    c.decoder_hidden = 6;
    c.answers = {"a0", "a1", "a2", "a3"};
    return c;
}

inline SyntheticSpec small_spec(std::uint64_t seed = 0) {
    SyntheticSpec s;
    s.num_classes = 8;
    s.attribute_values = 2;
    s.train_samples = 64;
    s.val_samples = 16;
    s.test_samples = 32;
    s.seq_len = 6;
    s.text_len = 3;
    s.audio_dim = 6;
    s.visual_dim = 6;
    s.text_dim = 4;
    s.key_dim = 8;
    s.seed = seed;
    return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ravqa_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace ravqa::testing
