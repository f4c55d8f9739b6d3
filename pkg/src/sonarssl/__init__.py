"""Self-supervised pretraining and probe evaluation for sonar image patches."""

__version__ = "0.1.0"
