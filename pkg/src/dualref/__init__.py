"""Anomaly detection on patch-feature maps, guided by normal and abnormal
reference sets. Library modules:

- features:  binary feature/mask formats, manifests, mask downsampling
- episodes:  training/test episode sampling over a manifest
- autodiff:  minimal 2-D tensor engine with reverse-mode differentiation
- scoring:   cosine nearest-neighbor scores and residual maps
- model:     proxy attention over reference residuals, score fusion
- training:  focal+dice+BCE losses, AdamW, the episode training loop
- metrics:   AUROC / AP / F1-max / per-region overlap
- pipeline:  frozen-model scoring, upsampling, diagnostics
- synth:     synthetic desk-scale benchmark generator
- cli:       command-line entry points
"""

__version__ = "0.1.0"
