import os

# Pin BLAS threading before numpy loads so reductions are deterministic
# across runs (single-threaded test mode).
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
