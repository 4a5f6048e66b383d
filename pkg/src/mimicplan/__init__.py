"""Online imitation learning with a latent world model.

The learner never sees environment rewards. A critic trained by inverse
soft-Q matching on expert and behavioral data doubles as a reward decoder
(r = Q(z, a) - gamma * V(z')), and a sampling-based planner optimizes decoded
rewards through the learned latent dynamics.

Components: ``diffcore`` (autodiff engine), ``worldmodel`` (encoder, dynamics,
critic ensemble, policy prior), ``objectives`` (joint losses), ``replay``
(trajectory storage and segment sampling), ``planner`` (stochastic trajectory
optimization), ``envs`` (toy control tasks with scripted experts), ``trainer``
(online loop), ``cli`` (command-line entry points).
"""

__version__ = "0.1.0"
