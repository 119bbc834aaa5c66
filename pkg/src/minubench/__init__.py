"""White-box evaluation toolkit for minutiae-based fingerprint matchers."""

from .core import Minutia, MinutiaKind, MinutiaeTemplate, TemplateFormatError, validate
from .matcher import MatchScore, MatcherConfig, match_score

__version__ = "0.1.0"

__all__ = [
    "Minutia",
    "MinutiaKind",
    "MinutiaeTemplate",
    "TemplateFormatError",
    "validate",
    "MatchScore",
    "MatcherConfig",
    "match_score",
    "__version__",
]
