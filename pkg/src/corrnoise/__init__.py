"""Correlated-noise Delta-summation in the shuffle model.

Modules:
  dist: NB and discrete Laplace pmfs, sampling, truncation, convolution.
  divergence: hockey-stick divergence and DP checks.
  atoms: zero-sum noise atoms and the right inverse C.
  protocol: randomizer, shuffler, analyzer, central equivalent, real and
    sparse-vector wrappers.
  calibration: parameter selection and closed-form predictions.
  baselines: central Discrete Laplace, IKOS, fragmented RAPPOR.
  harness: sweeps and tables; `cli` is the command-line front end.
"""

__version__ = "0.1.0"
