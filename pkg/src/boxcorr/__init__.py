"""Box-level view-correspondence self-supervised pretraining on a small numpy autograd engine."""

__version__ = "0.1.0"
