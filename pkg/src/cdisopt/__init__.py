"""Optimized synthetic correlated diffusion imaging (CDIs) toolkit.

Fits mono-exponential diffusion models, mixes native and synthetic DWI
signals into calibrated CDIs volumes, tunes the mixing exponents with a
bounded Nelder-Mead search against tumour-delineation AUC, and exports
standardized multiparametric tensors and classification reports.
"""

from .cdis import (
    CalibrationSpec,
    CdisConfig,
    ConfigError,
    MultiparametricVolume,
    calibrate,
    compute_cdis,
    fuse_multiparametric,
    mix_signals,
)
from .cohort_io import (
    Cohort,
    CohortError,
    FormatError,
    Patient,
    PhantomSpec,
    export_tensor,
    generate_phantom,
    load_cohort,
    read_tensor,
    read_volume,
    write_cohort,
    write_volume,
)
from .diffusion import AdcFit, DwiSeries, fit_adc, synthesize_signal
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    auc,
    classification_metrics,
    cohort_mean_auc,
    loocv_aggregate,
    voxel_auc,
)
from .simplex import OptResult, SimplexOptions, nelder_mead, optimize_cdis_coefficients
from .train import ScheduleSpec, cosine_lr, sample_weights
from .volume import Dims, Mask3D, Volume3D, resample_nearest, resample_trilinear, standardize

__version__ = "0.1.0"
