"""
kgdiffrec Package

Knowledge-graph diffusion recommender: random-walk attention over the
user-item graph, relation-aware KG embeddings, a user-guided diffusion model
that denoises the knowledge graph, and contrastive training between the
original and denoised views.
"""

__version__ = "1.0.0"
__author__ = "yangzq50"
__license__ = "MIT"

__all__ = [
    "cli",
    "config",
    "errors",
    "models",
    "services",
]
