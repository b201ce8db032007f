"""Multimodal melt-pool regression on a small numpy autodiff core.

Modules:

* :mod:`meltfusion.tensor`   reverse-mode autodiff and Adam
* :mod:`meltfusion.layers`   conv, pooling, batch norm, dense, LSTM, attention
* :mod:`meltfusion.data`     dataset I/O, preprocessing, windows, synthetic data
* :mod:`meltfusion.models`   the cnn, rnn, fused and student models, checkpoints
* :mod:`meltfusion.training` recipes, training loop, distillation, metrics
* :mod:`meltfusion.cli`      the ``meltfusion`` command
"""

__version__ = "0.1.0"
