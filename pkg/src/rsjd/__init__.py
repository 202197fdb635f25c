"""Risk-sensitive asset management under jump-diffusion prices."""

__version__ = "0.1.0"
