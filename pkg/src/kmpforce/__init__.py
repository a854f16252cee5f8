"""Learning position-conditioned contact-force profiles from demonstrations.

Demonstrations are aligned with Soft-DTW, encoded by a GMM, turned into a
GMR reference database and imitated by a kernelized movement primitive
(KMP) that drives an admittance-controlled probe in a simulated phantom.
"""

from kmpforce.errors import DataError, DivergenceError, KMPForceError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "DivergenceError", "KMPForceError", "NumericalError", "__version__"]
