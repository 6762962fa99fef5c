"""State-space kernels: discretization, scans and the selective SSM."""
from .core import (
    DiscreteSsm,
    associative_combine,
    convolution_kernel,
    discretize,
    kernel_conv,
    readout,
    scan_parallel,
    scan_recurrent,
    scan_states,
)
from .kernels import BACKEND, available_backends
from .selective import SelectiveSSM, selective_scan, selective_scan_op

__all__ = [
    "BACKEND",
    "DiscreteSsm",
    "SelectiveSSM",
    "associative_combine",
    "available_backends",
    "convolution_kernel",
    "discretize",
    "kernel_conv",
    "readout",
    "scan_parallel",
    "scan_recurrent",
    "scan_states",
    "selective_scan",
    "selective_scan_op",
]
