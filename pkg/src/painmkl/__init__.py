"""Personalized pain detection from multi-channel fNIRS windows.

Pipeline pieces: windowing and preprocessing (:mod:`painmkl.ingest`),
penalized b-spline smoothing (:mod:`painmkl.bspline`), window features
(:mod:`painmkl.features`), spectral task assignment (:mod:`painmkl.cluster`),
channel kernels (:mod:`painmkl.kernels`), the LSSVM base learner
(:mod:`painmkl.lssvm`), the multi-task multiple-kernel optimizer
(:mod:`painmkl.mtmkl`), the cross-validation protocol (:mod:`painmkl.evaluation`)
and a synthetic cohort generator (:mod:`painmkl.synth`).
"""

__version__ = "0.1.0"
FORMAT_VERSION = "1"
