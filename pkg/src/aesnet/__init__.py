"""Keypoint-supervised aesthetic assessment of breast-treatment photographs.

Modules: ``tensor`` (autodiff), ``asymmetry`` (keypoint features), ``dataset``
(synthetic torsos and IO), ``network``, ``training``, ``retrieval``,
``explain`` (LRP), ``svm`` (SMO baselines) and ``cli``.
"""

__version__ = "0.1.0"
