#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "midialign/crnn.hpp"
#include "midialign/errors.hpp"
#include "support/gradcheck.hpp"

using namespace midialign;

TEST_SUITE("crnn") {

TEST_CASE("gradient check, running statistics") {
    for (auto cell : {RnnCell::lstm, RnnCell::gru}) {
        for (const auto& e : testing::gradient_check(testing::miniature_config(cell), 6, 2, false, 11)) {
            INFO(e.name, " ", to_string(cell));
            CHECK(e.relative_error <= 1e-3);
        }
    }
}

TEST_CASE("gradient check, batch statistics") {
    for (const auto& e : testing::gradient_check(testing::miniature_config(), 6, 2, true, 5)) {
        INFO(e.name);
        if (e.name.find("conv") != std::string::npos && e.name.find(".bias") != std::string::npos) {
            CHECK(e.analytic_norm < 1e-9);
        } else {
            CHECK(e.relative_error <= 1e-3);
        }
    }
}

namespace {

Matrix<float> random_matrix(std::mt19937_64& rng, std::size_t rows, double density) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix<float> m(rows, kPitchCount);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < kPitchCount; ++c) m(r, c) = density < 0 ? float(u(rng)) : float(u(rng) < density);
    return m;
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.conv_filters = {4, 4, 8};
    cfg.dense_embed = 16;
    cfg.rnn_hidden = 16;
    cfg.dropout = 0.0;
    return cfg;
}

// Target is a fixed chord pattern; the input roll is the same pattern two
// frames late and the features mark the target onsets.
TrainingExample toy_example(const std::string& name, std::size_t frames, int base) {
    TrainingExample ex{name, Matrix<float>(frames, kPitchCount), Matrix<float>(frames, kPitchCount),
                       Matrix<float>(frames, kPitchCount)};
    for (std::size_t t = 0; t < frames; ++t) {
        const int block = int(t / 10);
        if (t % 10 >= 7) continue;
        for (int k = 0; k < 3; ++k) {
            const int pitch = base + (block * 5 + k * 4) % 30;
            ex.target(t, pitch) = 1.0f;
            ex.features(t, pitch) = t % 10 == 0 ? 1.0f : 0.5f;
            if (t + 2 < frames) ex.input_roll(t + 2, pitch) = 1.0f;
        }
    }
    return ex;
}

}  // namespace

TEST_CASE("parameter count, default configuration") {
    // conv 160 + 2320 + 4640, bn 128, dense 704*256 + 256 per branch;
    // lstm 4*256*(512+256+2) per direction; head 88*512 + 88.
    ModelConfig cfg;
    CHECK(parameter_count(cfg) == 1997560);
    cfg.rnn_cell = RnnCell::gru;
    CHECK(parameter_count(cfg) == 1603320);
}

TEST_CASE("parameter count matches the tensors") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> small(1, 6);
    for (int i = 0; i < 20; ++i) {
        ModelConfig cfg;
        cfg.conv_filters = {small(rng), small(rng), small(rng)};
        cfg.dense_embed = small(rng) * 2;
        cfg.rnn_hidden = small(rng);
        cfg.rnn_cell = i % 2 ? RnnCell::gru : RnnCell::lstm;
        cfg.bidirectional = i % 3 != 0;
        Crnn<float> model(cfg, i);
        std::size_t total = 0;
        for (const auto& p : model.parameters()) total += p.value.size();
        const std::size_t f1 = cfg.conv_filters[0], f2 = cfg.conv_filters[1], f3 = cfg.conv_filters[2];
        const std::size_t e = cfg.dense_embed, h = cfg.rnn_hidden, gates = i % 2 ? 3 : 4;
        const std::size_t dirs = cfg.bidirectional ? 2 : 1;
        const std::size_t branch = 10 * f1 + 9 * f1 * f2 + f2 + 9 * f2 * f3 + f3 + 2 * (f1 + f2 + f3) + f3 * 22 * e + e;
        const std::size_t expected = 2 * branch + dirs * gates * h * (2 * e + h + 2) + 88 * dirs * h + 88;
        CHECK(total == expected);
        CHECK(parameter_count(cfg) == expected);
        CHECK(model.parameter_count() == expected);
    }
}

TEST_CASE("output shape and range") {
    std::mt19937_64 rng(8);
    Crnn<float> model(ModelConfig{}, 1);
    const auto out = model.infer(random_matrix(rng, 200, 0.1), random_matrix(rng, 200, -1));
    REQUIRE(out.rows() == 200);
    REQUIRE(out.cols() == 88);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out.data()[i] > 0.0f);
        CHECK(out.data()[i] < 1.0f);
    }
}

TEST_CASE("blind transcription ignores the roll") {
    std::mt19937_64 rng(9);
    auto cfg = small_config();
    cfg.blind_transcription = true;
    Crnn<float> model(cfg, 2);
    const auto feats = random_matrix(rng, 40, -1);
    const auto a = model.infer(random_matrix(rng, 40, 0.1), feats);
    const auto b = model.infer(random_matrix(rng, 40, 0.4), feats);
    CHECK(std::equal(a.data(), a.data() + a.size(), b.data()));
}

TEST_CASE("duplicated batch rows agree in eval mode") {
    std::mt19937_64 rng(10);
    Crnn<float> model(small_config(), 3);
    const auto roll = random_matrix(rng, 30, 0.2);
    const auto feats = random_matrix(rng, 30, -1);
    SequenceBatch<float> in{2, 30, {}, {}};
    for (int k = 0; k < 2; ++k) {
        in.roll.insert(in.roll.end(), roll.data(), roll.data() + roll.size());
        in.features.insert(in.features.end(), feats.data(), feats.data() + feats.size());
    }
    auto ws = Crnn<float>::make_workspace();
    const auto out = model.forward(in, PassOptions{}, *ws);
    const std::size_t half = 30 * kPitchCount;
    CHECK(std::equal(out.begin(), out.begin() + half, out.begin() + half));
}

TEST_CASE("bce examples") {
    const std::vector<float> half(10, 0.5f), ones(10, 1.0f), zeros(10, 0.0f);
    CHECK(bce_loss(std::span<const float>(half), std::span<const float>(ones)) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(bce_loss(std::span<const float>(half), std::span<const float>(zeros)) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    std::vector<double> exact{0, 1, 1, 0}, tgt{0, 1, 1, 0};
    const double l = bce_loss(std::span<const double>(exact), std::span<const double>(tgt));
    CHECK(l >= 0.0);
    CHECK(l <= 1.62e-6);
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> p(7), t(7);
        for (auto& v : p) v = u(rng);
        for (auto& v : t) v = u(rng) < 0.5;
        CHECK(bce_loss(std::span<const double>(p), std::span<const double>(t)) >= 0.0);
    }
    const std::vector<float> short_target(9, 1.0f);
    CHECK_THROWS_AS(bce_loss(std::span<const float>(half), std::span<const float>(short_target)), ArgumentError);
}

TEST_CASE("weights round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "midialign_crnn_weights";
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(13);
    const auto cfg = small_config();
    Crnn<float> model(cfg, 4);
    const auto store = model.to_store();
    save_weights(store, dir / "w.bin");
    const auto back = load_weights(dir / "w.bin", &cfg);
    CHECK(back.config == cfg);
    REQUIRE(back.tensors.size() == store.tensors.size());
    for (std::size_t i = 0; i < store.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == store.tensors[i].name);
        CHECK(back.tensors[i].shape == store.tensors[i].shape);
        CHECK(std::memcmp(back.tensors[i].data.data(), store.tensors[i].data.data(),
                          store.tensors[i].data.size() * sizeof(float)) == 0);
    }
    const auto roll = random_matrix(rng, 25, 0.2), feats = random_matrix(rng, 25, -1);
    const auto a = model.infer(roll, feats);
    const auto b = infer(back, roll, feats);
    CHECK(std::equal(a.data(), a.data() + a.size(), b.data()));

    auto other = cfg;
    other.rnn_hidden = 8;
    CHECK_THROWS_AS(load_weights(dir / "w.bin", &other), LoadError);

    // A store whose tensor shapes disagree with its config names the tensor.
    auto bad = store;
    bad.config.rnn_hidden = 8;
    save_weights(bad, dir / "bad.bin");
    try {
        Crnn<float>::from_store(load_weights(dir / "bad.bin"));
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find("rnn") != std::string::npos);
    }

    std::string bytes;
    {
        std::ifstream in(dir / "w.bin", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    {
        std::ofstream out(dir / "trunc.bin", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    try {
        load_weights(dir / "trunc.bin");
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find("truncated file while reading") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("weights format version is checked") {
    const auto dir = std::filesystem::temp_directory_path() / "midialign_crnn_version";
    std::filesystem::create_directories(dir);
    save_weights(Crnn<float>(small_config(), 1).to_store(), dir / "w.bin");
    std::string bytes;
    {
        std::ifstream in(dir / "w.bin", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    // Locate the version field by its value right after the magic.
    const std::uint32_t v = WeightStore::kFormatVersion;
    const auto pos = bytes.find(std::string(reinterpret_cast<const char*>(&v), 4));
    REQUIRE(pos != std::string::npos);
    bytes[pos] = char(99);
    {
        std::ofstream out(dir / "v.bin", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
    }
    try {
        load_weights(dir / "v.bin");
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("embeddings shift with the input") {
    std::mt19937_64 rng(14);
    const auto cfg = small_config();
    Crnn<float> model(cfg, 5);
    const std::size_t n = 40, k = 5, width = cfg.embedding_size();
    const auto roll = random_matrix(rng, n, 0.2), feats = random_matrix(rng, n, -1);
    SequenceBatch<float> a{1, n, {roll.data(), roll.data() + roll.size()}, {feats.data(), feats.data() + feats.size()}};
    SequenceBatch<float> b{1, n + k, std::vector<float>(k * kPitchCount, 0.0f), std::vector<float>(k * kPitchCount, 0.0f)};
    b.roll.insert(b.roll.end(), a.roll.begin(), a.roll.end());
    b.features.insert(b.features.end(), a.features.begin(), a.features.end());
    const auto ea = model.embeddings(a);
    const auto eb = model.embeddings(b);
    REQUIRE(ea.size() == n * width);
    REQUIRE(eb.size() == (n + k) * width);
    const std::size_t margin = 3;
    for (std::size_t t = margin; t + margin < n; ++t)
        for (std::size_t j = 0; j < width; ++j) CHECK(eb[(t + k) * width + j] == doctest::Approx(ea[t * width + j]).epsilon(1e-5));
}

TEST_CASE("overfits two short sequences") {
    const std::vector<TrainingExample> set{toy_example("a", 60, 30), toy_example("b", 60, 45)};
    auto cfg = small_config();
    cfg.dense_embed = 64;
    cfg.rnn_hidden = 64;
    TrainConfig tc;
    tc.max_epochs = 200;
    tc.min_epochs = 200;
    tc.batch_size = 1;
    tc.lr = 0.005;
    tc.seed = 1;
    const auto result = train(set, set, cfg, tc);
    REQUIRE(!result.log.empty());
    CHECK(result.log.back().train_loss < 0.02);
    for (const auto& ex : set) {
        const auto out = infer(result.weights, ex.input_roll, ex.features);
        std::size_t active = 0, hit = 0;
        for (std::size_t i = 0; i < ex.target.size(); ++i) {
            if (ex.target.data()[i] < 0.5f) continue;
            ++active;
            hit += out.data()[i] >= 0.5f;
        }
        CHECK(hit >= 0.9 * active);
    }
}

TEST_CASE("best checkpoint and determinism") {
    std::vector<TrainingExample> train_set, valid_set;
    for (int i = 0; i < 4; ++i) train_set.push_back(toy_example("t" + std::to_string(i), 40, 30 + 3 * i));
    valid_set.push_back(toy_example("v", 40, 40));
    TrainConfig tc;
    tc.max_epochs = 12;
    tc.min_epochs = 1;
    tc.patience = 3;
    tc.batch_size = 2;
    tc.lr = 0.005;
    tc.seed = 7;
    const auto cfg = small_config();
    const auto r1 = train(train_set, valid_set, cfg, tc);
    const auto r2 = train(train_set, valid_set, cfg, tc);
    REQUIRE(!r1.log.empty());
    CHECK(r1.log.front().train_loss == r2.log.front().train_loss);
    double best = r1.log.front().valid_loss;
    for (const auto& e : r1.log) best = std::min(best, e.valid_loss);
    CHECK(r1.best_valid_loss == doctest::Approx(best).epsilon(1e-9));
    const auto restored = Crnn<float>::from_store(r1.weights);
    CHECK(evaluate_loss(restored, valid_set) == doctest::Approx(best).epsilon(1e-5));
}

TEST_CASE("training errors") {
    const auto cfg = small_config();
    TrainConfig tc;
    tc.max_epochs = 2;
    tc.min_epochs = 1;
    const std::vector<TrainingExample> one{toy_example("a", 20, 40)};
    CHECK_THROWS_AS(train({}, one, cfg, tc), ConfigError);
    CHECK_THROWS_AS(train(one, {}, cfg, tc), ConfigError);
    auto poisoned = one;
    poisoned[0].target(3, 10) = std::numeric_limits<float>::quiet_NaN();
    try {
        train(poisoned, one, cfg, tc);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
}

TEST_CASE("config validation") {
    auto cfg = small_config();
    cfg.rnn_hidden = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.conv_filters[1] = -2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(rnn_cell_from_string("rnn"), ConfigError);
    TrainConfig tc;
    tc.lr = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

}
