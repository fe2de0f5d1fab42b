"""AdvFilter - pixel-denoising defenses against L-inf adversarial attacks."""

__version__ = "0.1.0"
