# cmlrain - rain-field reconstruction from commercial microwave link attenuations
# Diffusion posterior samplers, a censored GP prior and gauge-interpolation baselines

__version__ = "0.1.0"
