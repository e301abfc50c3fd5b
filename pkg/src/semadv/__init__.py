"""semadv: semantically masked adversarial attacks on face-forgery detectors.

The toolkit trains a small reference detector on procedurally generated
faces, computes class activation maps, ranks and selects facial semantic
regions, runs region-constrained and classical adversarial attacks, and
evaluates attack success, transferability and visual quality.
"""

from .attacks import (
    ATTACKS,
    AttackResult,
    BasicIterativeAttack,
    CarliniWagnerAttack,
    DeepFoolAttack,
    FastGradientSignAttack,
    GlobalFeatureAttack,
    PerturbationBudget,
    ProjectedGradientDescentAttack,
    SemanticMaskAttack,
    feature_distance,
    make_attack,
)
from .cam import ActivationMap, compute_cam, overlay_cam
from .detector import (
    ClassActivationFeatures,
    ConstantObjective,
    CrossEntropyObjective,
    FeatureDistanceObjective,
    ForgeryDetector,
    LogitMarginObjective,
    LogitObjective,
    PixelSumObjective,
    train_reference_detector,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    EvaluationError,
    FormatError,
    SelectionError,
    TrainingError,
    UndefinedRateError,
    UnsupportedObjectiveError,
)
from .imaging import apply_mask, blend_masked, load_image, save_image
from .metrics import (
    QualityReport,
    SweepRow,
    TransferCell,
    attack_success_rate,
    mae,
    mse,
    perturbation_sweep,
    psnr,
    quality_report,
    ssim,
    transfer_matrix,
)
from .regions import (
    DEFAULT_ATTACK_REGIONS,
    LABEL_IDS,
    LABEL_NAMES,
    RegionScore,
    SelectionPolicy,
    build_mask,
    fixed_policy,
    load_label_map,
    save_label_map,
    score_regions,
    select_regions,
    threshold_policy,
    top_k_policy,
    value_rate,
)
from .synthetic import (
    SyntheticSample,
    generate_synthetic_dataset,
    read_dataset,
    samples_to_arrays,
    write_dataset,
)

__version__ = "0.1.0"
