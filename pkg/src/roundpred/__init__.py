"""Roundabout vehicle trajectory prediction toolkit.

Pipeline: synthetic or drone-recorded tracks -> scene samples -> maneuver
labels -> anchor trajectories -> recurrent encoder-decoder training ->
multi-modal prediction and RMSE evaluation.
"""

__version__ = "0.1.0"
