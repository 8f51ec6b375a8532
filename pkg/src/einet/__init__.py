"""Emotional voice conversion with continuous intensity control.

Modules: ``dsp`` (features), ``corpus`` (manifests, toy corpus, batching),
``emotion_eval`` (VAD providers), ``intensity_mapper`` (VAD <-> category and
intensity flow), ``nn_core`` (building blocks, alignment search), ``model``
(the conditional VAE), ``training``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
