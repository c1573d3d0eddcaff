"""MixANT: selective state-space layers with routed forget-gate experts, wrapped in a
diffusion pipeline for stochastic long-term dense action anticipation."""

__version__ = "1.0.0"
