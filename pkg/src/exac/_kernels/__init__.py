"""Kernel selection: compiled extension when available, pure Python otherwise.

Set EXAC_PURE_PYTHON=1 to force the fallback (used by the parity tests
and the benchmark).  `BACKEND` reports which implementation is active.
"""

import os

if os.environ.get("EXAC_PURE_PYTHON") == "1":
    from exac._kernels._pykernels import *  # noqa: F401,F403
    from exac._kernels._pykernels import BACKEND  # noqa: F401
else:
    try:
        from exac._kernels._ckernels import *  # noqa: F401,F403
        from exac._kernels._ckernels import BACKEND  # noqa: F401
    except ImportError:
        from exac._kernels._pykernels import *  # noqa: F401,F403
        from exac._kernels._pykernels import BACKEND  # noqa: F401

__all__ = [
    "BACKEND",
    "split_chunks",
    "merge_pairs",
    "join_chunks",
    "missing_seqs",
    "encode_samples",
    "decode_samples",
    "interpolate_track",
]
