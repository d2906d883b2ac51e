"""chordkd: teacher-student chord recognition with selective knowledge distillation.

Subpackage map:

* :mod:`chordkd.chords` - chord grammar, the 170-class vocabulary, frame/interval conversions
* :mod:`chordkd.metrics` - weighted comparison metrics, segmentation, CSR/WCSR/ACQA, frame agreement
* :mod:`chordkd.features` - CQT extraction, normalization, synthetic corpus, root statistics
* :mod:`chordkd.distill` - classification/KD losses with analytic gradients, selective weighting
* :mod:`chordkd.model` - dual-encoder student, template teacher, smoothing/voting inference
* :mod:`chordkd.pipeline` - two-stage training, splits, schedules, label-noise injection
* :mod:`chordkd.cli` - command-line entry point
"""

__version__ = "0.1.0"
