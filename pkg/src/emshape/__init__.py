"""emshape: local shape descriptors, instance metrics, and reference kernels
for volumetric EM segmentation tooling."""

__version__ = "0.1.0"

from .volume import (
    LabelVolume,
    Roi,
    Volume3D,
    VolumeFormatError,
    VoxelSpacing,
    crop,
    read_volume,
    write_volume,
)
from .lsd import (
    CHANNEL_NAMES,
    Engine,
    LsdChannelGroup,
    LsdParams,
    LsdVolume,
    NeighborhoodStencil,
    StencilSizeError,
    Weighting,
    build_stencil,
    compute_lsd,
    compute_lsd_fast,
    compute_lsd_oracle,
    lsd_channel,
    normalize_lsd,
    read_lsd,
    write_lsd,
)
from .metrics import (
    DEFAULT_THRESHOLDS,
    EvalReport,
    InstanceMatchTable,
    average_precision_3d,
    build_match_table,
    evaluate_labels,
    instance_dice,
)
from .ssm import (
    AdapterConfig,
    Discretization,
    MambaBlockParams,
    ScanNumericError,
    SsmParams,
    TokenSequence,
    adapter_forward,
    mamba_block_forward,
    scan_parallel,
    scan_sequential,
    selective_scan_parallel,
    selective_scan_sequential,
)
from .fact import (
    FactIncrement,
    FactMode,
    ParamCount,
    WeightSite,
    apply_increment,
    reconstruct_delta,
    trainable_param_count,
)
from .synth import PackingError, SynthKind, SynthSpec, generate, generate_detailed
