"""GaussNet: CNN layers built on a Gaussian-derivative basis, with pixel and
anti-aliased baselines and tools to measure and certify shift robustness."""
from .basis import GaussBasis, LipschitzEstimate, build_basis, estimate_lipschitz, sigma_schedule, synthesize_kernel
from .conv import conv_basis, conv_direct, conv_fft, convolve
from .data import LabeledDataset, derive_zp, load_cifar10, synth_shapes
from .layers import (
    LayerSpec,
    LipschitzCertificate,
    NetworkSpec,
    build_network,
    certify_bound,
    classify,
    count_parameters,
    forward_network,
)
from .robustness import ShiftedTestSet, certify_insensitivity, delta1, delta2, negative_control, sigma_sweep
from .serialize import load_network, save_network
from .tensor import subsample, translate
from .train import AdamState, adam_step, loss_and_grad, train

__version__ = "0.1.0"
