"""CTR prediction with hash-based retrieval over long user behavior sequences."""
from eta_ctr.hashing import Fingerprint, HashPlanes, hamming, new_planes, simhash
from eta_ctr.retrieval import RetrievalRequest, RetrievalResult, topk_exact, topk_hamming, topk_hard

__all__ = [
    "Fingerprint",
    "HashPlanes",
    "RetrievalRequest",
    "RetrievalResult",
    "hamming",
    "new_planes",
    "simhash",
    "topk_exact",
    "topk_hamming",
    "topk_hard",
]
__version__ = "0.1.0"
