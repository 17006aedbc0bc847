#pragma once

#include <cstddef>
#include <vector>

// Row-major matrix kernels. The float path is register-tiled for the
// single-core target; other element types fall back to a naive loop
// (used by the 64-bit gradient-check instantiation on tiny shapes).

namespace pabn::gemm {

namespace detail {

constexpr int kMR = 4;    // rows per register tile
constexpr int kNR = 32;   // columns per register tile
constexpr int kKB = 240;  // K-panel depth, keeps the B panel in L1

template <int MR>
inline void kernel_nn(int K, const float* A, int lda, const float* B, int ldb,
                      float* C, int ldc) {
    float acc[MR][kNR];
    for (int m = 0; m < MR; ++m) {
        for (int n = 0; n < kNR; ++n) {
            acc[m][n] = 0.0f;
        }
    }
    for (int k = 0; k < K; ++k) {
        const float* b = B + static_cast<std::size_t>(k) * ldb;
        for (int m = 0; m < MR; ++m) {
            const float a = A[static_cast<std::size_t>(m) * lda + k];
            for (int n = 0; n < kNR; ++n) {
                acc[m][n] += a * b[n];
            }
        }
    }
    for (int m = 0; m < MR; ++m) {
        float* c = C + static_cast<std::size_t>(m) * ldc;
        for (int n = 0; n < kNR; ++n) {
            c[n] += acc[m][n];
        }
    }
}

// A is stored K x M; the tile reads A[k*lda + m].
template <int MR>
inline void kernel_tn(int K, const float* A, int lda, const float* B, int ldb,
                      float* C, int ldc) {
    float acc[MR][kNR];
    for (int m = 0; m < MR; ++m) {
        for (int n = 0; n < kNR; ++n) {
            acc[m][n] = 0.0f;
        }
    }
    for (int k = 0; k < K; ++k) {
        const float* b = B + static_cast<std::size_t>(k) * ldb;
        const float* a = A + static_cast<std::size_t>(k) * lda;
        for (int m = 0; m < MR; ++m) {
            const float av = a[m];
            for (int n = 0; n < kNR; ++n) {
                acc[m][n] += av * b[n];
            }
        }
    }
    for (int m = 0; m < MR; ++m) {
        float* c = C + static_cast<std::size_t>(m) * ldc;
        for (int n = 0; n < kNR; ++n) {
            c[n] += acc[m][n];
        }
    }
}

inline std::vector<float>& tail_panel() {
    static thread_local std::vector<float> buf;
    return buf;
}

}  // namespace detail

// C += A * B where A is M x K, B is K x N, C is M x N, row-major with
// explicit leading strides. The caller zeroes C when plain assignment is
// wanted.
inline void gemm_nn(int M, int N, int K, const float* A, int lda,
                    const float* B, int ldb, float* C, int ldc) {
    using namespace detail;
    for (int k0 = 0; k0 < K; k0 += kKB) {
        const int kb = (K - k0 < kKB) ? (K - k0) : kKB;
        const float* Ak = A + k0;
        const float* Bk = B + static_cast<std::size_t>(k0) * ldb;
        int n0 = 0;
        for (; n0 + kNR <= N; n0 += kNR) {
            int m0 = 0;
            for (; m0 + kMR <= M; m0 += kMR) {
                kernel_nn<kMR>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda,
                               Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc);
            }
            switch (M - m0) {
                case 3: kernel_nn<3>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                case 2: kernel_nn<2>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                case 1: kernel_nn<1>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                default: break;
            }
        }
        if (n0 < N) {
            const int nb = N - n0;
            auto& panel = tail_panel();
            panel.assign(static_cast<std::size_t>(kb) * kNR, 0.0f);
            for (int k = 0; k < kb; ++k) {
                const float* src = Bk + static_cast<std::size_t>(k) * ldb + n0;
                float* dst = panel.data() + static_cast<std::size_t>(k) * kNR;
                for (int n = 0; n < nb; ++n) {
                    dst[n] = src[n];
                }
            }
            for (int m0 = 0; m0 < M; m0 += kMR) {
                const int mb = (M - m0 < kMR) ? (M - m0) : kMR;
                float tile[kMR][kNR];
                for (int m = 0; m < mb; ++m) {
                    for (int n = 0; n < kNR; ++n) {
                        tile[m][n] = 0.0f;
                    }
                }
                switch (mb) {
                    case 4: kernel_nn<4>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 3: kernel_nn<3>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 2: kernel_nn<2>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 1: kernel_nn<1>(kb, Ak + static_cast<std::size_t>(m0) * lda, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    default: break;
                }
                for (int m = 0; m < mb; ++m) {
                    float* c = C + static_cast<std::size_t>(m0 + m) * ldc + n0;
                    for (int n = 0; n < nb; ++n) {
                        c[n] += tile[m][n];
                    }
                }
            }
        }
    }
}

// C += A^T * B where A is stored K x M, B is K x N, C is M x N.
inline void gemm_tn(int M, int N, int K, const float* A, int lda,
                    const float* B, int ldb, float* C, int ldc) {
    using namespace detail;
    for (int k0 = 0; k0 < K; k0 += kKB) {
        const int kb = (K - k0 < kKB) ? (K - k0) : kKB;
        const float* Ak = A + static_cast<std::size_t>(k0) * lda;
        const float* Bk = B + static_cast<std::size_t>(k0) * ldb;
        int n0 = 0;
        for (; n0 + kNR <= N; n0 += kNR) {
            int m0 = 0;
            for (; m0 + kMR <= M; m0 += kMR) {
                kernel_tn<kMR>(kb, Ak + m0, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc);
            }
            switch (M - m0) {
                case 3: kernel_tn<3>(kb, Ak + m0, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                case 2: kernel_tn<2>(kb, Ak + m0, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                case 1: kernel_tn<1>(kb, Ak + m0, lda, Bk + n0, ldb, C + static_cast<std::size_t>(m0) * ldc + n0, ldc); break;
                default: break;
            }
        }
        if (n0 < N) {
            const int nb = N - n0;
            auto& panel = tail_panel();
            panel.assign(static_cast<std::size_t>(kb) * kNR, 0.0f);
            for (int k = 0; k < kb; ++k) {
                const float* src = Bk + static_cast<std::size_t>(k) * ldb + n0;
                float* dst = panel.data() + static_cast<std::size_t>(k) * kNR;
                for (int n = 0; n < nb; ++n) {
                    dst[n] = src[n];
                }
            }
            for (int m0 = 0; m0 < M; m0 += kMR) {
                const int mb = (M - m0 < kMR) ? (M - m0) : kMR;
                float tile[kMR][kNR];
                for (int m = 0; m < mb; ++m) {
                    for (int n = 0; n < kNR; ++n) {
                        tile[m][n] = 0.0f;
                    }
                }
                switch (mb) {
                    case 4: kernel_tn<4>(kb, Ak + m0, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 3: kernel_tn<3>(kb, Ak + m0, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 2: kernel_tn<2>(kb, Ak + m0, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    case 1: kernel_tn<1>(kb, Ak + m0, lda, panel.data(), kNR, &tile[0][0], kNR); break;
                    default: break;
                }
                for (int m = 0; m < mb; ++m) {
                    float* c = C + static_cast<std::size_t>(m0 + m) * ldc + n0;
                    for (int n = 0; n < nb; ++n) {
                        c[n] += tile[m][n];
                    }
                }
            }
        }
    }
}

template <typename T>
void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
             T* C, int ldc) {
    for (int m = 0; m < M; ++m) {
        for (int k = 0; k < K; ++k) {
            const T a = A[static_cast<std::size_t>(m) * lda + k];
            const T* b = B + static_cast<std::size_t>(k) * ldb;
            T* c = C + static_cast<std::size_t>(m) * ldc;
            for (int n = 0; n < N; ++n) {
                c[n] += a * b[n];
            }
        }
    }
}

template <typename T>
void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
             T* C, int ldc) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * lda;
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        for (int m = 0; m < M; ++m) {
            T* c = C + static_cast<std::size_t>(m) * ldc;
            const T av = a[m];
            for (int n = 0; n < N; ++n) {
                c[n] += av * b[n];
            }
        }
    }
}

// dst (cols x rows) = src (rows x cols) transposed.
template <typename T>
void transpose_mat(int rows, int cols, const T* src, int lds, T* dst, int ldd) {
    constexpr int BS = 32;
    for (int r0 = 0; r0 < rows; r0 += BS) {
        const int rb = (rows - r0 < BS) ? (rows - r0) : BS;
        for (int c0 = 0; c0 < cols; c0 += BS) {
            const int cb = (cols - c0 < BS) ? (cols - c0) : BS;
            for (int r = r0; r < r0 + rb; ++r) {
                const T* s = src + static_cast<std::size_t>(r) * lds;
                for (int c = c0; c < c0 + cb; ++c) {
                    dst[static_cast<std::size_t>(c) * ldd + r] = s[c];
                }
            }
        }
    }
}

}  // namespace pabn::gemm
