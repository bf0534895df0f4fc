"""driftcomp: drift-resilient RRAM in-memory computing, desk scale.

Simulates conductance drift of a quantized backbone frozen in a
nonvolatile array, trains lightweight low-rank digital compensation
(two vectors per layer per drift level against shared frozen random
projections), schedules compensation sets over deployment time, and
accounts for the hardware cost of the whole arrangement.
"""

__version__ = "0.1.0"

from .checkpoint import BackboneCheckpoint, load_checkpoint, quantize_backbone, save_checkpoint
from .compensation import (
    ActiveCompensation,
    CompensationConfig,
    LoRAPair,
    ScalingVectorSet,
    SharedProjections,
    count_compensation_params,
    init_lora_pair,
    init_shared_projections,
    load_archive,
    lora_forward,
    make_projections_for_model,
    new_scaling_set,
    pointwise_conv_compensation,
    save_archive,
    select_active_set,
    slice_projections,
    vera_plus_forward,
)
from .costs import (
    CostReport,
    HardwareProfile,
    area_estimate,
    cost_report,
    count_model_ops,
    energy_estimate,
    storage_report,
)
from .drift import (
    AnalyticDriftParams,
    ConductanceMap,
    DriftedWeights,
    MeasuredDriftTable,
    PreparedBackbone,
    conductance_to_weights,
    drift_mean,
    drift_std,
    inject_drift,
    sample_drifted_conductance,
    sample_measured_drift,
    weights_to_conductance,
)
from .errors import ConfigError, DomainError, DriftcompError, FormatError
from .model_zoo import (
    LabeledDataset,
    LayerSpec,
    ModelSpec,
    build_toy_resnet,
    evaluate_accuracy,
    forward,
    load_binary_images,
    make_synthetic_dataset,
    normalized_accuracy,
    save_binary_images,
)
from .quant import QuantScheme, QuantizedTensor, calibrate_scale, dequantize, fake_quant_activation, quantize
from .scheduler import (
    BackboneEvaluator,
    EvalStats,
    Schedule,
    SchedulerConfig,
    eval_stats,
    load_schedule,
    run_schedule,
    save_schedule,
    sets_vs_tolerance,
    should_trigger,
)
from .training import (
    GradientSet,
    TrainConfig,
    backward_scaling_vectors,
    forward_with_drift,
    loss_cross_entropy,
    pretrain_backbone,
    train_set_at_time,
)
