"""Linear probes, bias-mitigation strategies and fairness metrics for frozen embeddings."""

__version__ = "0.1.0"
