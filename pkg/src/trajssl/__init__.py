"""Self-supervised pre-training engine for trajectory prediction.

Kept import-light on purpose: the CLI must be able to pin BLAS thread
counts via environment variables before numpy is first imported.
"""

__version__ = "0.1.0"
