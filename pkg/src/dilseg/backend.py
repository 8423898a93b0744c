"""Kernel backend selection.

The convolution/pooling inner loops exist twice: a compiled Cython
extension (``dilseg._kernels``) and a pure-numpy fallback
(``dilseg._kernels_py``). Forward outputs are bitwise identical between
the two; backward passes agree to rounding noise.

Selection happens once at import and is explicit, never silent:

* ``DILSEG_KERNELS=compiled`` — require the extension, raise if missing.
* ``DILSEG_KERNELS=python``   — force the numpy fallback.
* unset / ``auto``            — prefer compiled, fall back with a warning.

``KERNEL_BACKEND`` records the active choice; ``benchmarks/bench_kernels.py``
compares the two.
"""

import os
import warnings

_REQUESTED = os.environ.get("DILSEG_KERNELS", "auto").lower()

if _REQUESTED == "python":
    from dilseg import _kernels_py as _impl
    KERNEL_BACKEND = "python"
elif _REQUESTED == "compiled":
    from dilseg import _kernels as _impl
    KERNEL_BACKEND = "compiled"
elif _REQUESTED == "auto":
    try:
        from dilseg import _kernels as _impl
        KERNEL_BACKEND = "compiled"
    except ImportError:
        from dilseg import _kernels_py as _impl
        KERNEL_BACKEND = "python"
        warnings.warn(
            "dilseg._kernels extension not built; using the pure-numpy "
            "fallback (set DILSEG_KERNELS=python to silence)",
            RuntimeWarning,
        )
else:
    raise ValueError(
        f"DILSEG_KERNELS must be 'compiled', 'python' or 'auto', got {_REQUESTED!r}"
    )

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernel = _impl.conv2d_grad_kernel
tconv2d_forward = _impl.tconv2d_forward
tconv2d_grad_input = _impl.tconv2d_grad_input
tconv2d_grad_kernel = _impl.tconv2d_grad_kernel
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
