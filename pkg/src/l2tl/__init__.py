"""Learning to transfer learn: policy-weighted joint source/target training."""

__version__ = "0.1.0"
