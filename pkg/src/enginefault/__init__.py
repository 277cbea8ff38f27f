"""Fault classification on multichannel engine test-bed signals.

Submodules: ``testbed_sim`` (synthetic corpus), ``preprocess`` (resampling and
windowing), ``dataset`` (splits and batches), ``nn`` (numpy autodiff core),
``models`` (transformer and RNN), ``train_eval`` (fit loop) and ``cli``.
"""

__version__ = "0.1.0"
