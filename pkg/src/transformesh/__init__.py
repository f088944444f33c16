"""Spiral mesh autoencoders with a transformer over visit latents, for longitudinal shape prediction."""

from .cohort import Cohort, CohortConfig, generate_cohort, load_cohort, save_cohort
from .errors import TransforMeshError
from .hierarchy import MeshHierarchy, build_hierarchy, load_or_build_hierarchy
from .mesh import TriangleMesh, icosphere, load_mesh, save_mesh
from .model import (
    AUGMENTED, MISSING, OBSERVED, FCBN, CopyReference, MeshAE, ModelConfig, SequenceBatch, TransforMesh,
    build_model,
)
from .training import AugmentationConfig, LossConfig, OptimizerConfig, sequence_loss, train

__version__ = "0.1.0"
