"""Limited-feedback MU-MIMO precoding: codebook/BD/RBD baselines and end-to-end DNNs."""

__version__ = "0.1.0"
