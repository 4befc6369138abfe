"""Desk-scale simulator and analysis toolkit for a microwave two-qubit phase gate.

Subpackages:

* :mod:`iongate.hilbert`   space layout, operators, fidelities
* :mod:`iongate.dynamics`  effective interaction, noise channels, error budget
* :mod:`iongate.sequence`  pulse schedules and their propagators
* :mod:`iongate.detect`    photon-count model, calibration, POVMs, synthesis
* :mod:`iongate.estimate`  fidelity estimators, bootstrap, bias tools
* :mod:`iongate.cli`       command-line entry points
"""

__version__ = "0.1.0"
