"""RIS phase-shift optimization for cell-free massive MIMO with a GA expert and diffusion samplers."""

__version__ = "0.1.0"
