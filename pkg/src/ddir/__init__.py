"""Discontinuity-preserving diffeomorphic registration with regional velocity fields."""

__version__ = "0.1.0"

from .diffeo import (  # noqa: E402
    DeformationBundle,
    compose_displacements,
    compose_regional_fields,
    integrate_svf,
    interface_jump,
    jacobian_determinant,
)
from .evaluation import EvalReport, dice_score, evaluate_registration, folding_count, hausdorff_mm  # noqa: E402
from .grid import LabelGrid, ScalarGrid, VectorGrid, warp  # noqa: E402
from .losses import LossWeights, kl_loss, ncc_loss, soft_dice_loss, total_loss  # noqa: E402
from .phantom import PhantomConfig, PhantomPair, generate_phantom, phantom_dataset  # noqa: E402
from .registration import (  # noqa: E402
    RegistrationConfig,
    RegistrationResult,
    register_amortized,
    register_direct,
    train_amortized,
)
