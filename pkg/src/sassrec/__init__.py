"""Multi-scenario two-tower retrieval with scenario-adaptive gated transfer
and contrastive cross-scenario pretraining, in plain numpy."""

__version__ = "0.1.0"
