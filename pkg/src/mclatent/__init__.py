"""Masked latent prediction pretraining with multiple-choice hypotheses.

Submodules: ``numerics`` (autodiff substrate), ``frontend`` (audio to
patches), ``encoders``, ``predictor``, ``objectives``, ``trainer``,
``probe``, ``analysis`` and ``cli``.
"""

__version__ = "0.1.0"
