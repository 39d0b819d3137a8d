"""Progressive volumetric recovery: three sequentially trained
cross-sectional adversarial models, one per rectilinear orientation, with
prior-estimate injection between stages.

Subpackages: geometry (volumes, orientations, slicing), kspace (FFTs,
sampling, data consistency), nets (models, checkpoints), training (the
per-stage loop), pipeline (multi-stage training, inference, order search),
metrics (PSNR / SSIM), data (file formats, phantoms), cli.
"""

from provo.geometry import (
    Orientation,
    ProgressionOrder,
    SliceStack,
    Volume,
    enumerate_orders,
    extract_neighborhood,
    normalize_volume,
    split_volume,
    stack_to_volume,
    take_slice,
)
from provo.pipeline import (
    Pipeline,
    ReconstructionTask,
    SynthesisTask,
    order_search,
    train_pipeline,
)
from provo.training import LossWeights, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Orientation",
    "ProgressionOrder",
    "SliceStack",
    "Volume",
    "enumerate_orders",
    "extract_neighborhood",
    "normalize_volume",
    "split_volume",
    "stack_to_volume",
    "take_slice",
    "Pipeline",
    "ReconstructionTask",
    "SynthesisTask",
    "order_search",
    "train_pipeline",
    "LossWeights",
    "TrainConfig",
    "__version__",
]
