"""
Simulation core of the expansion simulator.

This package holds the physics of a levitated particle released from an optical
trap into a dark potential:
- core_model: parameter models, Gaussian phase-space states and their figures of merit.
- analytic_dynamics: closed-form variances for inverted, frequency-jump and free evolution.
- moment_propagator: numerical moment integration for arbitrary k(t), Mathieu/Floquet tools.
- trajectory_ensemble: stochastic single shots with lock-in readout and their ensembles.
- estimation: least-squares fits of sigma(t_r) and coherence-length curves.

Usage:
    from simulator.analytic_dynamics import expansion_curve
    from simulator.estimation import fit_expansion
"""
