"""Near-field XL-MIMO positioning and channel estimation with a Mamba U-Net.

Layers, from the bottom up:

    geometry, channel, pilots   array layouts, spherical-wave channels, pilots
    dataset                     seeded sample generation and the XLMD format
    autodiff, layers, optim     reverse-mode differentiation on numpy arrays
    mamba, net                  selective state-space block and the U-Net
    pipeline                    two-stage training and inference
    evaluation, plotting        metrics, baselines, SNR sweeps, SVG curves
    config, cli                 run configuration files and the command line
"""

__version__ = "0.1.0"
