"""Grey-box adversarial transferability lab for models tuned from shared backbones."""

__version__ = "0.1.0"
