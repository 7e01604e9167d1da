"""Steel-strip surface defect recognition.

A frozen VGG16-prefix feature extractor feeding a small trainable
classifier, built on hand-written NCHW kernels, plus the data pipeline and
experiment harness around it.
"""

__version__ = "0.1.0"
