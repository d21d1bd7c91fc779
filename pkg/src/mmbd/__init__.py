"""Maximum-margin backdoor detection and activation-bounding mitigation on a
small numpy network engine."""

__version__ = "0.1.0"
