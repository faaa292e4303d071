"""Unified video/geometry toy stack: frozen video-diffusion backbone plus a
trainable geometry branch, coupled by gated cross-attention, supervised by an
analytic renderer."""

__version__ = "0.1.0"
