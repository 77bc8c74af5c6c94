"""Video transformer with interchangeable space-time attention schemes.

Built on a scratch tensor engine with tape autodiff; ships the training and
nine-clip ensemble inference recipes, a synthetic temporal-order task, an
analytic attention cost model, and finite-difference gradient verification.
"""

from .attention import AttentionScheme
from .model import ModelConfig, VideoTransformer

__version__ = "0.1.0"

__all__ = ["AttentionScheme", "ModelConfig", "VideoTransformer", "__version__"]
