"""Few-shot 3D portrait stylization on synthetic scenes.

Pipeline stages: synthetic data generation, 3D-aware GAN pretraining,
2D style-prior creation and pair augmentation, latent-stack encoder
inversion with multi-view cycle consistency, style transfer learning with
paired guidance, and evaluation (stylization distance, view-sweep strips,
inversion metrics).
"""

__version__ = "0.1.0"
