"""Co-attention VQA with an LSTM-controlled external memory, on a small numpy autodiff core."""

__version__ = "0.1.0"
