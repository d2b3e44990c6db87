"""Two-party federated transfer learning for attack detection across networks.

Modules:
    nn: dense MLP forward/backward and SGD.
    losses: logistic, alignment and regularization terms of the joint objective.
    ftl: party state machines, training and prediction sessions.
    transport: binary framing plus in-process and TCP channels.
    udl: autoencoder + 2-means baseline.
    data: CSV ingestion, encoding, vertical split, synthetic generator.
    eval: AUC, significance numbers and the multi-run experiment harness.
"""

__version__ = "0.1.0"
