"""Low-rank motion correction, automatic frame selection, and diffusion
tensor fitting for cardiac diffusion-weighted image stacks."""

from .stack import (  # noqa: F401
    Annotations,
    DatasetError,
    ImageStack,
    Protocol,
    ProtocolEntry,
    central_crop,
    load_dataset,
    save_dataset,
)
from .lowrank import rank1_reference, reconstruct_rank, truncated_svd  # noqa: F401
from .register import (  # noqa: F401
    PlanarTransform,
    RegistrationConfig,
    TransformSet,
    apply_transform,
    dft_register,
    optimize_transform,
    register_stack,
)
from .selection import donut_roi, reject_outliers, select_frames  # noqa: F401
from .dti import average_by_config, eig3_sym, fit_tensor, helix_angle_map  # noqa: F401
from .metrics import fit_profiles, negative_eig_counts, transmural_profiles  # noqa: F401
from .phantom import GroundTruth, PhantomSpec, compare_to_truth, make_phantom  # noqa: F401
from .pipeline import PipelineConfig, run_pipeline  # noqa: F401

__version__ = "0.1.0"
