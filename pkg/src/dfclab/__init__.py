"""Feedback-controller-driven credit assignment for deep networks.

Subpackages and modules:

* ``numerics``: pseudoinverses, projectors, spectra, angles.
* ``network``: feedforward model, Jacobians and the weight-structure matrix.
* ``controller``: output targets and the leaky PI controller.
* ``dynamics``: simulated and analytic steady states, noisy feedback phase.
* ``plasticity``: local increments, buffers and optimizers.
* ``analysis``: alignment ratios, oracle updates, stability.
* ``baselines``: backprop and direct feedback alignment.
* ``data``: student-teacher data and IDX files.
* ``experiment``: configuration, training loop, checkpoints, CLI.
"""

__version__ = "0.1.0"
