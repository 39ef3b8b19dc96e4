"""Multimodal accident-risk prediction over hexagonal regions.

The package follows the pipeline order: `geoindex` and `ingest` handle raw
inputs, `featurize` aggregates them into per-window vectors, `dataset`
assembles training containers, `model`/`train` hold the classifier and its
optimization recipe, `baselines` and `evaluation` cover comparisons and the
experiment protocols, and `synth` builds hermetic worlds with known signal.
"""

__version__ = "0.1.0"
