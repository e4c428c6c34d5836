"""Console entry point.

Applies the M2D_THREADS worker cap to the BLAS thread-count variables
before numpy loads, then hands off to the CLI.
"""

import os
import sys


def main() -> int:
    threads = os.environ.get("M2D_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
