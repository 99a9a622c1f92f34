"""World-model next-state augmentation for offline-to-online reinforcement learning.

Modules, bottom up: :mod:`wmaug.nn` (numpy MLPs and Adam), :mod:`wmaug.envs`
(pendulum and point-mass tasks, reference scores), :mod:`wmaug.data`
(datasets, replay buffer, ORLD files), :mod:`wmaug.worldmodel` (variational
one-step model), :mod:`wmaug.agents` (TD3, TD3+BC, augmentation),
:mod:`wmaug.pipeline` (experiments, scoring, critic analysis) and
:mod:`wmaug.cli`.
"""

__version__ = "0.1.0"
