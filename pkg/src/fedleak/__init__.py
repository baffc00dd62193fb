"""fedleak: a desk-scale simulator for measuring how much training data leaks
from a small language model fine-tuned with federated averaging.

The library covers the full pipeline: synthetic PII-bearing corpora, an MLP
next-token model trained with AdamW, FedAvg rounds with per-round global
checkpoints, extraction attacks (free generation and prefix completion, with
plain nucleus decoding or a cross-round difference decoder), ROUGE-based
leakage scoring, and the three mitigations (gradient noise, KL update
regularization, low-rank adapters).
"""

__version__ = "0.1.0"
