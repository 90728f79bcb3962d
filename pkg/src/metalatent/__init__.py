"""Few-shot meta-learning with a variational latent space, differentiable
convex base-learners, and an episodic two-loop trainer, all on numpy."""

from . import autodiff, baselearners, checkpoint, episodes, gradcheck, latent, model, optim, qp, training
from .autodiff import Tensor, precision, no_grad

__all__ = [
    "autodiff",
    "baselearners",
    "checkpoint",
    "episodes",
    "gradcheck",
    "latent",
    "model",
    "optim",
    "qp",
    "training",
    "Tensor",
    "precision",
    "no_grad",
]

__version__ = "0.1.0"
