"""simgap: a desk-scale sim-to-real laboratory for BEV vehicle segmentation.

Generate synthetic driving scenes under controllable sampling priors, measure
label-marginal divergences between domains, and train a dense segmentation
network with adversarial discrepancy minimization and pseudo-labels.
"""

__version__ = "0.1.0"
