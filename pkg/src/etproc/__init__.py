"""Evidential classifiers with total-calibration evaluation.

Four predictors behind one interface (BNN, EDL, ENP, ETP with an
attention-queried external memory), closed-form Dirichlet/Gaussian
analytics on a minimal reverse-mode autodiff core, and a CLI harness
that scores model fit, in-domain calibration, and out-of-domain
detection.
"""

__version__ = "0.1.0"
