"""Byte-level CNN malware classification with analysis tooling.

Modules: ``tensor`` (autodiff), ``model`` (the byte CNN), ``pe`` (PE parser
and region map), ``x86`` (small decoder), ``cluster`` (HDBSCAN and MDS),
``probe`` (first-layer activations), ``shap`` (GradientSHAP segments),
``corpus`` and ``experiments`` (synthetic data and training regimes), ``cli``.
"""

__version__ = "0.1.0"
