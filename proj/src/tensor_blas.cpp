#include <cblas.h>

#include <cstdlib>

namespace mdcap::detail {

namespace {
// OpenBLAS is pinned to one thread; parallelism lives at the example and run
// level where the reduction order is controlled.
struct BlasInit {
  BlasInit() {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    openblas_set_num_threads(1);
  }
};
const BlasInit blas_init;
}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace mdcap::detail
