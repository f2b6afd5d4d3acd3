"""Toolkit for synthesizing contrast-enhanced breast MRI slices from
pre-contrast inputs with conditional denoising diffusion models.

Subpackages cover the full desk-scale pipeline: phantom data generation,
volume-to-slice preprocessing, cosine-schedule diffusion, a conditional
U-Net backbone, composite and tumor-aware losses, training with EMA
tracking, six-metric evaluation (MAE/SSIM/PSNR/perceptual/FID/FRD), and a
blinded reader-study backend.
"""

__version__ = "0.1.0"
