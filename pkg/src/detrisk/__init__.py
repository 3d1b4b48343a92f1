"""Deterioration-risk prognosis from chest images and routine clinical variables.

Pieces: a saliency-guided multiple-instance image classifier, a discrete-time
deterioration-risk-curve head on the same backbone, gradient-boosted trees on
tabular features, a per-horizon linear ensemble of the two modalities, and the
random-search model-selection protocol tying them together.  Everything runs
on synthetic cohorts with known ground truth.
"""

__version__ = "0.1.0"

VERSION_STRING = f"v{__version__}-desk"
