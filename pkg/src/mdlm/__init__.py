"""Desk-scale masked diffusion language modelling toolkit."""

__version__ = "0.1.0"
__all__ = ["MaskedDiffusionLM"]


def __getattr__(name):
    # deferred so the CLI does not pay for importing scikit-learn
    if name == "MaskedDiffusionLM":
        from .estimator import MaskedDiffusionLM

        return MaskedDiffusionLM
    raise AttributeError(f"module 'mdlm' has no attribute {name!r}")
