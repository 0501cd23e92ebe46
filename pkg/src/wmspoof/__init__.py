"""Watermark-robust anti-spoofing toolkit.

Modules: ``audio`` (I/O, resampling, STFT, attacks), ``codecs`` (six
handcrafted watermark schemes), ``corpus`` (mix plans and
materialisation), ``evaluation`` (EER and ratio tables), ``kpwl``
(two-phase training with distillation and anchoring), ``benchmark``
(synthetic shifted-domain comparison) and ``cli``.
"""

__version__ = "0.1.0"
