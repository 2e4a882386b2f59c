"""Joint training and pruning through a stopband weight reparametrization."""

from .budget import BudgetSpec, budget_loss, surrogate_cost, total_loss
from .data_io import Checkpoint, Dataset, load_checkpoint, load_cifar10, save_checkpoint, synthetic_dataset, synthetic_splits
from .kernels import get_backend, set_backend
from .models import Model, build, count_prunable
from .pruning import PruneReport, effective_prune, magnitude_prune, measure
from .reparam import ReparamConfig, Temperature, apparent_weights, h, h_grad, h_unstable
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainHistory, train

__version__ = "0.1.0"
