#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "meow/codec.hpp"
#include "meow/dsp.hpp"
#include "meow/rng.hpp"

using namespace meow;
using codec::AcousticTokenGrid;
using codec::CodecConfig;

namespace {

audio::Waveform random_wave(size_t n, uint64_t seed, float amp = 0.5f) {
    Rng rng(seed);
    audio::Waveform w;
    w.samples.resize(n);
    for (auto& s : w.samples) s = amp * static_cast<float>(rng.normal() * 0.3);
    return w;
}

// Direct DCT-II basis in double precision, independent of dsp::FrameDct.
std::vector<double> dct_basis_oracle(size_t n) {
    std::vector<double> basis(n * n);
    for (size_t k = 0; k < n; ++k) {
        const double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (size_t j = 0; j < n; ++j) {
            basis[k * n + j] = s * std::cos(M_PI * (2.0 * j + 1.0) * k / (2.0 * n));
        }
    }
    return basis;
}

double frame_mse(const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// Independent sequential residual k-means (Lloyd + k-means++ with the
// documented draw order), used to cross-check train_codebooks seed for seed.
struct OracleKMeans {
    static size_t nearest(const std::vector<float>& x, const MatF& c) {
        size_t best = 0;
        float bd = 0;
        for (size_t j = 0; j < c.rows; ++j) {
            float d = 0;
            for (size_t i = 0; i < c.cols; ++i) {
                const float diff = x[i] - c.at(j, i);
                d += diff * diff;
            }
            if (j == 0 || d < bd) {
                bd = d;
                best = j;
            }
        }
        return best;
    }

    static MatF run(const MatF& pts, size_t k, uint64_t seed, size_t iters = 25) {
        Rng rng(seed);
        const size_t n = pts.rows, dim = pts.cols;
        MatF cents(k, dim);
        std::vector<float> d2(n);
        auto l2 = [&](const float* a, const float* b) {
            float acc = 0;
            for (size_t i = 0; i < dim; ++i) {
                const float d = a[i] - b[i];
                acc += d * d;
            }
            return acc;
        };
        const size_t first = rng.below(n);
        std::copy_n(pts.row(first), dim, cents.row(0));
        for (size_t i = 0; i < n; ++i) d2[i] = l2(pts.row(i), cents.row(0));
        for (size_t c = 1; c < k; ++c) {
            double total = 0;
            for (float d : d2) total += d;
            size_t pick;
            if (total <= 0) {
                pick = rng.below(n);
            } else {
                const double r = rng.uniform() * total;
                double acc = 0;
                pick = n - 1;
                for (size_t i = 0; i < n; ++i) {
                    acc += d2[i];
                    if (acc >= r) {
                        pick = i;
                        break;
                    }
                }
            }
            std::copy_n(pts.row(pick), dim, cents.row(c));
            for (size_t i = 0; i < n; ++i) {
                d2[i] = std::min(d2[i], l2(pts.row(i), cents.row(c)));
            }
        }

        std::vector<int32_t> assign(n, 0), prev;
        std::vector<float> dist(n);
        for (size_t iter = 0; iter < iters; ++iter) {
            for (size_t i = 0; i < n; ++i) {
                std::vector<float> x(pts.row(i), pts.row(i) + dim);
                assign[i] = static_cast<int32_t>(nearest(x, cents));
                dist[i] = l2(pts.row(i), cents.row(assign[i]));
            }
            if (assign == prev) break;
            prev = assign;
            std::vector<double> sums(k * dim, 0.0);
            std::vector<size_t> counts(k, 0);
            for (size_t i = 0; i < n; ++i) {
                ++counts[assign[i]];
                for (size_t d = 0; d < dim; ++d) {
                    sums[assign[i] * dim + d] += pts.at(i, d);
                }
            }
            for (size_t c = 0; c < k; ++c) {
                if (counts[c] != 0) continue;
                size_t far = 0;
                float fd = -1;
                for (size_t i = 0; i < n; ++i) {
                    if (dist[i] > fd) {
                        fd = dist[i];
                        far = i;
                    }
                }
                dist[far] = -2;
                counts[c] = 1;
                for (size_t d = 0; d < dim; ++d) sums[c * dim + d] = pts.at(far, d);
                const size_t old = static_cast<size_t>(assign[far]);
                if (old != c && counts[old] > 1) {
                    --counts[old];
                    for (size_t d = 0; d < dim; ++d) {
                        sums[old * dim + d] -= pts.at(far, d);
                    }
                }
                assign[far] = static_cast<int32_t>(c);
            }
            for (size_t c = 0; c < k; ++c) {
                for (size_t d = 0; d < dim; ++d) {
                    cents.at(c, d) =
                        static_cast<float>(sums[c * dim + d] / double(counts[c]));
                }
            }
        }
        return cents;
    }
};

}  // namespace

TEST_CASE("constant-zero waveform transforms to all-zero coefficients") {
    audio::Waveform w;
    w.samples.assign(16, 0.0f);
    const MatF coeffs = dsp::frame_transform(w, 4);
    REQUIRE(coeffs.rows == 4);
    for (float c : coeffs.v) CHECK(c == 0.0f);
}

TEST_CASE("frame transform preserves per-frame L2 norm (orthonormality)") {
    const audio::Waveform w = random_wave(320 * 5, 42);
    const MatF coeffs = dsp::frame_transform(w, 320);
    for (size_t t = 0; t < coeffs.rows; ++t) {
        double sample_norm = 0, coeff_norm = 0;
        for (size_t j = 0; j < 320; ++j) {
            sample_norm += double(w.samples[t * 320 + j]) * w.samples[t * 320 + j];
            coeff_norm += double(coeffs.at(t, j)) * coeffs.at(t, j);
        }
        CHECK(coeff_norm == doctest::Approx(sample_norm).epsilon(1e-6));
    }
}

TEST_CASE("impulse coefficients match the direct basis-matrix oracle") {
    audio::Waveform w;
    w.samples = {1.0f, 0.0f, 0.0f, 0.0f};
    const MatF coeffs = dsp::frame_transform(w, 4);
    const auto basis = dct_basis_oracle(4);
    REQUIRE(coeffs.rows == 1);
    for (size_t k = 0; k < 4; ++k) {
        // Impulse at n=0 picks out column 0 of the basis.
        CHECK(coeffs.at(0, k) == doctest::Approx(basis[k * 4 + 0]).epsilon(1e-6));
    }
}

TEST_CASE("transform round-trip is exact to 1e-5 per sample") {
    const audio::Waveform w = random_wave(320 * 20, 1234, 0.9f);
    const MatF coeffs = dsp::frame_transform(w, 320);
    const auto back = dsp::frame_inverse(coeffs, 320);
    REQUIRE(back.size() == w.samples.size());
    for (size_t i = 0; i < w.samples.size(); ++i) {
        CHECK(std::abs(back[i] - w.samples[i]) <= 1e-5);
    }
}

TEST_CASE("partial trailing frame is zero-padded") {
    audio::Waveform w;
    w.samples.assign(10, 0.25f);
    const MatF coeffs = dsp::frame_transform(w, 4);
    CHECK(coeffs.rows == 3);
    const auto back = dsp::frame_inverse(coeffs, 4);
    REQUIRE(back.size() == 12);
    for (size_t i = 10; i < 12; ++i) CHECK(std::abs(back[i]) < 1e-5);
}

TEST_CASE("empty waveform is a domain error") {
    audio::Waveform w;
    CHECK_THROWS_AS(dsp::frame_transform(w, 4), DomainError);
}

TEST_CASE("K distinct frames with K clusters quantize exactly at level 0") {
    CodecConfig cfg;
    cfg.frame_size = 6;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 8;
    Rng rng(15);
    MatF frames(8, 6);
    for (auto& x : frames.v) x = static_cast<float>(rng.normal());
    const auto books = codec::train_codebooks(frames, cfg, 99);
    REQUIRE(books.size() == 2);
    // Every training frame must be exactly one level-0 centroid.
    for (size_t i = 0; i < frames.rows; ++i) {
        float best = 1e30f;
        for (size_t j = 0; j < 8; ++j) {
            float d = 0;
            for (size_t c = 0; c < 6; ++c) {
                const float diff = frames.at(i, c) - books[0].centroids.at(j, c);
                d += diff * diff;
            }
            best = std::min(best, d);
        }
        CHECK(best <= 1e-10f);
    }
}

TEST_CASE("single-level config behaves as plain k-means quantization") {
    CodecConfig cfg;
    cfg.frame_size = 5;
    cfg.n_levels = 1;
    cfg.n_coarse = 1;
    cfg.n_fine = 0;
    cfg.vocab_size = 4;
    Rng rng(7);
    MatF frames(64, 5);
    for (auto& x : frames.v) x = static_cast<float>(rng.normal());
    const auto books = codec::train_codebooks(frames, cfg, 5);
    REQUIRE(books.size() == 1);
    const MatF oracle = OracleKMeans::run(frames, 4, Rng(5).fork(0).seed());
    REQUIRE(oracle.rows == books[0].centroids.rows);
    for (size_t i = 0; i < oracle.size(); ++i) {
        CHECK(books[0].centroids.v[i] == doctest::Approx(oracle.v[i]).epsilon(1e-5));
    }
}

TEST_CASE("sequential residual k-means matches the seeded oracle, norms non-increasing") {
    CodecConfig cfg;
    cfg.frame_size = 8;
    cfg.n_levels = 3;
    cfg.n_coarse = 2;
    cfg.n_fine = 1;
    cfg.vocab_size = 4;
    Rng rng(21);
    MatF frames(64, 8);
    for (auto& x : frames.v) x = static_cast<float>(rng.normal());
    const uint64_t seed = 31;
    const auto books = codec::train_codebooks(frames, cfg, seed);
    REQUIRE(books.size() == 3);

    // Oracle replays the same procedure: per-level k-means (forked seed),
    // minimum-norm centroid snapped to zero for levels >= 1, residual update.
    MatF residual = frames;
    std::vector<double> mean_norms;
    for (size_t level = 0; level < 3; ++level) {
        MatF cents = OracleKMeans::run(residual, 4, Rng(seed).fork(level).seed());
        if (level > 0) {
            size_t jmin = 0;
            float nmin = 1e30f;
            for (size_t j = 0; j < cents.rows; ++j) {
                float nj = 0;
                for (size_t c = 0; c < cents.cols; ++c) nj += cents.at(j, c) * cents.at(j, c);
                if (nj < nmin) {
                    nmin = nj;
                    jmin = j;
                }
            }
            std::fill_n(cents.row(jmin), cents.cols, 0.0f);
        }
        for (size_t i = 0; i < cents.size(); ++i) {
            CHECK(books[level].centroids.v[i] ==
                  doctest::Approx(cents.v[i]).epsilon(1e-5));
        }
        double norm = 0.0;
        for (size_t i = 0; i < residual.rows; ++i) {
            std::vector<float> x(residual.row(i), residual.row(i) + 8);
            const size_t j = OracleKMeans::nearest(x, cents);
            double n2 = 0;
            for (size_t c = 0; c < 8; ++c) {
                residual.at(i, c) -= cents.at(j, c);
                n2 += double(residual.at(i, c)) * residual.at(i, c);
            }
            norm += std::sqrt(n2);
        }
        mean_norms.push_back(norm / residual.rows);
    }
    // Mean residual norm after each level must not increase level to level.
    for (size_t l = 1; l < mean_norms.size(); ++l) {
        CHECK(mean_norms[l] <= mean_norms[l - 1] + 1e-9);
    }
}

TEST_CASE("too few frames raises insufficient-data") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 16;
    MatF frames(8, 4);
    CHECK_THROWS_AS(codec::train_codebooks(frames, cfg, 1), InsufficientDataError);
}

TEST_CASE("encode matches exhaustive nearest-centroid search on small grids") {
    // All cases with <= 4 frames and K_a <= 8, several seeds.
    for (const size_t ka : {2UL, 4UL, 8UL}) {
        for (const size_t frames_n : {1UL, 2UL, 4UL}) {
            CodecConfig cfg;
            cfg.frame_size = 6;
            cfg.n_levels = 3;
            cfg.n_coarse = 2;
            cfg.n_fine = 1;
            cfg.vocab_size = ka;
            Rng rng(1000 + ka * 10 + frames_n);
            std::vector<codec::Codebook> books(3);
            for (size_t l = 0; l < 3; ++l) {
                books[l].level = l;
                books[l].centroids = randn_mat<float>(ka, 6, rng);
            }
            MatF coeffs(frames_n, 6);
            for (auto& x : coeffs.v) x = static_cast<float>(rng.normal());
            const AcousticTokenGrid grid = codec::encode_frames(coeffs, books, cfg);

            for (size_t t = 0; t < frames_n; ++t) {
                std::vector<double> residual(6);
                for (size_t c = 0; c < 6; ++c) residual[c] = coeffs.at(t, c);
                for (size_t l = 0; l < 3; ++l) {
                    size_t best = 0;
                    double bd = 1e300;
                    for (size_t j = 0; j < ka; ++j) {
                        double d = 0;
                        for (size_t c = 0; c < 6; ++c) {
                            const double diff = residual[c] - books[l].centroids.at(j, c);
                            d += diff * diff;
                        }
                        if (d < bd) {
                            bd = d;
                            best = j;
                        }
                    }
                    CHECK(grid.at(t, l) == static_cast<int32_t>(best));
                    for (size_t c = 0; c < 6; ++c) {
                        residual[c] -= books[l].centroids.at(best, c);
                    }
                }
            }
        }
    }
}

TEST_CASE("frame equal to a centroid encodes to it with zero residual after") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 3;
    Rng rng(3);
    std::vector<codec::Codebook> books(2);
    books[0] = {0, randn_mat<float>(3, 4, rng)};
    books[1] = {1, randn_mat<float>(3, 4, rng)};
    // Zero-pin level 1 centroid 2 so the zero residual resolves there.
    std::fill_n(books[1].centroids.row(2), 4, 0.0f);

    MatF coeffs(1, 4);
    std::copy_n(books[0].centroids.row(1), 4, coeffs.row(0));
    const AcousticTokenGrid grid = codec::encode_frames(coeffs, books, cfg);
    CHECK(grid.at(0, 0) == 1);
    CHECK(grid.at(0, 1) == 2);  // the nearest-to-zero centroid
}

TEST_CASE("untrained codebooks are a state error") {
    CodecConfig cfg;
    const audio::Waveform w = random_wave(640, 8);
    CHECK_THROWS_AS(codec::encode(w, {}, cfg), StateError);
}

TEST_CASE("reconstruction MSE is non-increasing in levels_used") {
    CodecConfig cfg;
    cfg.frame_size = 32;
    cfg.n_levels = 4;
    cfg.n_coarse = 2;
    cfg.n_fine = 2;
    cfg.vocab_size = 16;
    const audio::Waveform train = random_wave(32 * 200, 77);
    const MatF frames = dsp::frame_transform(train, 32);
    const auto books = codec::train_codebooks(frames, cfg, 5);

    const audio::Waveform probe = random_wave(32 * 50, 78);
    const AcousticTokenGrid grid = codec::encode(probe, books, cfg);
    double prev = 1e300;
    for (size_t levels = 1; levels <= 4; ++levels) {
        const audio::Waveform rec = codec::decode(grid, levels, books, cfg);
        const double mse = frame_mse(rec.samples, probe.samples);
        CHECK(mse <= prev + 1e-12);
        prev = mse;
    }
}

TEST_CASE("encode-decode error equals the quantization residual (Parseval)") {
    CodecConfig cfg;
    cfg.frame_size = 16;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 8;
    const audio::Waveform train = random_wave(16 * 100, 11);
    const MatF frames = dsp::frame_transform(train, 16);
    const auto books = codec::train_codebooks(frames, cfg, 2);

    const audio::Waveform probe = random_wave(16 * 10, 12);
    const MatF coeffs = dsp::frame_transform(probe, 16);
    const AcousticTokenGrid grid = codec::encode_frames(coeffs, books, cfg);
    const MatF recon = codec::decode_frames(grid, 2, books, cfg);
    double coeff_err = 0;
    for (size_t i = 0; i < coeffs.size(); ++i) {
        const double d = double(coeffs.v[i]) - recon.v[i];
        coeff_err += d * d;
    }
    const audio::Waveform rec = codec::decode(grid, 2, books, cfg);
    double sample_err = 0;
    for (size_t i = 0; i < probe.samples.size(); ++i) {
        const double d = double(probe.samples[i]) - rec.samples[i];
        sample_err += d * d;
    }
    CHECK(sample_err == doctest::Approx(coeff_err).epsilon(1e-4));
}

TEST_CASE("all-zero grid with zero codebooks decodes to silence") {
    CodecConfig cfg;
    cfg.frame_size = 8;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 2;
    std::vector<codec::Codebook> books(2);
    books[0] = {0, MatF(2, 8)};
    books[1] = {1, MatF(2, 8)};
    AcousticTokenGrid grid;
    grid.n_frames = 5;
    grid.n_levels = 2;
    grid.vocab_size = 2;
    grid.tokens.assign(10, 0);
    const audio::Waveform w = codec::decode(grid, 2, books, cfg);
    REQUIRE(w.samples.size() == 40);
    for (float s : w.samples) CHECK(s == 0.0f);
}

TEST_CASE("single-frame decode matches the direct matrix computation") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 2;
    Rng rng(4);
    std::vector<codec::Codebook> books(2);
    books[0] = {0, randn_mat<float>(2, 4, rng)};
    books[1] = {1, randn_mat<float>(2, 4, rng)};
    AcousticTokenGrid grid;
    grid.n_frames = 1;
    grid.n_levels = 2;
    grid.vocab_size = 2;
    grid.tokens = {1, 0};
    const audio::Waveform w = codec::decode(grid, 2, books, cfg);

    const auto basis = dct_basis_oracle(4);
    for (size_t n = 0; n < 4; ++n) {
        double x = 0;
        for (size_t k = 0; k < 4; ++k) {
            const double coeff =
                double(books[0].centroids.at(1, k)) + books[1].centroids.at(0, k);
            x += coeff * basis[k * 4 + n];  // inverse = basis transpose
        }
        CHECK(w.samples[n] == doctest::Approx(x).epsilon(1e-5));
    }
}

TEST_CASE("levels_used out of range is a domain error") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 2;
    std::vector<codec::Codebook> books(2);
    books[0] = {0, MatF(2, 4)};
    books[1] = {1, MatF(2, 4)};
    AcousticTokenGrid grid;
    grid.n_frames = 1;
    grid.n_levels = 2;
    grid.vocab_size = 2;
    grid.tokens = {0, 0};
    CHECK_THROWS_AS(codec::decode(grid, 0, books, cfg), DomainError);
    CHECK_THROWS_AS(codec::decode(grid, 3, books, cfg), DomainError);
}

TEST_CASE("split_coarse_fine splits columns and concatenation restores") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 8;
    cfg.n_coarse = 4;
    cfg.n_fine = 4;
    cfg.vocab_size = 16;
    Rng rng(6);
    AcousticTokenGrid grid;
    grid.n_frames = 7;
    grid.n_levels = 8;
    grid.vocab_size = 16;
    grid.tokens.resize(56);
    for (auto& t : grid.tokens) t = static_cast<int32_t>(rng.below(16));

    const auto [coarse, fine] = codec::split_coarse_fine(grid, cfg);
    CHECK(coarse.n_levels == 4);
    CHECK(fine.n_levels == 4);
    for (size_t t = 0; t < 7; ++t) {
        for (size_t l = 0; l < 4; ++l) {
            CHECK(coarse.at(t, l) == grid.at(t, l));
            CHECK(fine.at(t, l) == grid.at(t, 4 + l));
        }
    }
    const AcousticTokenGrid joined = codec::concat_levels(coarse, fine);
    CHECK(joined.tokens == grid.tokens);
}

TEST_CASE("n_coarse = N-1 leaves exactly one fine level") {
    CodecConfig cfg;
    cfg.frame_size = 4;
    cfg.n_levels = 4;
    cfg.n_coarse = 3;
    cfg.n_fine = 1;
    cfg.vocab_size = 4;
    AcousticTokenGrid grid;
    grid.n_frames = 2;
    grid.n_levels = 4;
    grid.vocab_size = 4;
    grid.tokens.assign(8, 1);
    const auto [coarse, fine] = codec::split_coarse_fine(grid, cfg);
    CHECK(fine.n_levels == 1);
}

TEST_CASE("encode is deterministic and tokens stay in range") {
    CodecConfig cfg;
    cfg.frame_size = 16;
    cfg.n_levels = 3;
    cfg.n_coarse = 2;
    cfg.n_fine = 1;
    cfg.vocab_size = 8;
    const audio::Waveform train = random_wave(16 * 64, 99);
    const auto books = codec::train_codebooks(dsp::frame_transform(train, 16), cfg, 1);
    const audio::Waveform probe = random_wave(16 * 9, 100);
    const AcousticTokenGrid g1 = codec::encode(probe, books, cfg);
    const AcousticTokenGrid g2 = codec::encode(probe, books, cfg);
    CHECK(g1.tokens == g2.tokens);
    for (int32_t t : g1.tokens) {
        CHECK(t >= 0);
        CHECK(t < 8);
    }
}

TEST_CASE("codec save/load round-trips centroids through the container") {
    CodecConfig cfg;
    cfg.frame_size = 8;
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 4;
    const audio::Waveform train = random_wave(8 * 64, 55);
    auto codec_obj = codec::RvqCodec::train(dsp::frame_transform(train, 8), cfg, 9);
    const std::string path = "/tmp/meow_codec_test.meowcb";
    codec_obj.save(path);
    auto loaded = codec::RvqCodec::load(path);
    loaded.set_coarse_fine(1, 1);
    REQUIRE(loaded.codebooks().size() == 2);
    for (size_t l = 0; l < 2; ++l) {
        CHECK(loaded.codebooks()[l].centroids.v == codec_obj.codebooks()[l].centroids.v);
    }
    const audio::Waveform probe = random_wave(8 * 6, 56);
    CHECK(loaded.encode(probe).tokens == codec_obj.encode(probe).tokens);
}
