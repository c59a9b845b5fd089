"""Generalized laboratory-progress modeling at desk scale.

Synthesizes irregular longitudinal lab cohorts, pretrains one tiny recurrent
forecaster per lab parameter in two stages (supervised on interpolated
months, then self-supervised autoregressive rollout), and transfers the
frozen forecasters to an episodic binary-outcome cohort.
"""

__version__ = "0.1.0"
