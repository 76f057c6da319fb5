"""Desk-scale any-variate time-series stack.

Subpackages split by concern:

- ``syndata``: seeded wavelet / GARCH generators and their parameter samplers
- ``dataset``: record model, JSONL format, normalization, masking, patching,
  and the stochastic samplers that shape a training batch
- ``model`` / ``mixture``: the flattened-variate transformer encoder with a
  Student-T mixture head
- ``train`` / ``checkpoint``: optimization loops, LR schedule, early stopping,
  versioned binary checkpoints, grid search
- ``metrics``: point and probabilistic forecast scoring (CRPS/wQL, MSIS, ...)
- ``bayes``: exact likelihoods, random-walk Metropolis, prior-MC evidence
- ``experiments`` / ``cli``: scripted studies and the command line front end
"""

__version__ = "0.1.0"
