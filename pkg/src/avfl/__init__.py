"""Asymmetric vertical federated learning.

Two protocols for a federation where one party (the *weak* participant) holds
a small, privacy-sensitive ID set and the other (the *strong* participant)
holds a large one:

* asymmetric private set intersection over a commutative Pohlig-Hellman
  cipher (:mod:`avfl.apsi`), and
* genuine-with-dummy logistic regression over Paillier encryption
  (:mod:`avfl.avlr`).
"""
from .apsi import ApsiResultStrong, ApsiResultWeak, obfuscated_target_size, run_apsi
from .avlr import TrainTrace, VerticalDataset, auc, centralized_reference, train
from .estimator import AsymmetricVerticalLogisticRegression
from .federation import FederationClass, FederationProfile, classify

__all__ = [
    "ApsiResultStrong",
    "ApsiResultWeak",
    "AsymmetricVerticalLogisticRegression",
    "FederationClass",
    "FederationProfile",
    "TrainTrace",
    "VerticalDataset",
    "auc",
    "centralized_reference",
    "classify",
    "obfuscated_target_size",
    "run_apsi",
    "train",
]

__version__ = "0.1.0"
