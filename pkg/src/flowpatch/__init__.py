"""flowpatch: a desk-scale laboratory for adversarial patch attacks on
optical-flow estimators.

Pipeline: synthetic two-frame scenes with exact ground truth (data), two
miniature trainable flow networks plus a classical variational baseline
(networks, classical), differentiable patch pasting and homography-based
patch motion (patch), the cosine-objective patch optimiser (attack), EPE
reporting (evaluation), and the replicated-noise diagnostic (zeroflow).
"""

from .attack import AttackConfig, PseudoLabel, black_box_attack, cosine_loss, white_box_attack
from .classical import HSConfig, horn_schunck
from .data import (
    SamplePair,
    SceneConfig,
    flow_to_color,
    generate_dataset,
    generate_pair,
    load_dataset,
    read_flo,
    replicated_noise_pair,
    save_dataset,
    translation_probes,
    write_flo,
)
from .evaluation import (
    EvalReport,
    HornSchunckMethod,
    NetworkMethod,
    epe,
    evaluate_attack,
    format_table,
    relative_degradation,
    round_percent,
)
from .networks import (
    Family,
    FlowOutput,
    NetworkParams,
    NetworkSpec,
    init_params,
    load_params,
    mini_ed_forward,
    mini_sp_forward,
    save_params,
    train_supervised,
)
from .patch import (
    CameraModel,
    Patch,
    PatchMotion,
    TransformRanges,
    TransformSample,
    apply_patch,
    apply_patch_pair_moving,
    estimate_patch_homography,
    sample_transform,
)
from .tensor import GraphRecord, Tensor, backward, no_grad
from .zeroflow import ZeroFlowReport, checkerboard_score, spatial_invariance_score, zero_flow_test

__version__ = "0.1.0"
