"""relucert: train small ReLU classifiers with joint l1/linf margin
regularization and certify their robustness for every lp-norm at once."""

from .net_core import (
    ReluNet,
    ActivationPattern,
    RegionDescription,
    forward,
    classify,
    activation_pattern,
    region_description,
    random_net,
    load_model,
    save_model,
)
from .geometry import (
    BallPair,
    NormOrder,
    naive_union_bound,
    union_min_norm,
    union_witness,
    hull_min_norm,
    hull_membership,
    hull_boundary_oracle,
    ratio_analysis,
)
from .certify import (
    DistanceProfile,
    PointCertificate,
    EpsTriple,
    distance_profile,
    certify_single_norm,
    certify_universal,
    point_certificate,
    exact_robustness_oracle,
    robust_error_upper_bound,
)
from .mmr_train import (
    MmrLpConfig,
    MmrUniversalConfig,
    TrainConfig,
    TrainingDiverged,
    mmr_lp,
    mmr_universal,
    loss,
    loss_gradient,
    train,
)
from .attacks import (
    PgdConfig,
    project_lp_ball,
    pgd_attack,
    robust_error_lower_bound,
    overlap_stats,
)
from .datasets import Dataset, gen_blobs, gen_moons, gen_corners, load_dataset, save_dataset
from .cli import derive_eps2, run_evaluation, Report

__version__ = "0.1.0"
