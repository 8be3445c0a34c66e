"""Grey-box battery modeling toolkit.

Online equivalent-circuit identification (forgetting-factor RLS), neural
residual correction trained through the discretized circuit recurrence, and
extended-Kalman-filter state-of-charge estimation, with a built-in synthetic
battery oracle for end-to-end verification.
"""

__version__ = "0.1.0"

from .dataio import (
    RawSamples,
    SchemaError,
    SeriesData,
    improvement_pct,
    mse,
    parse_csv,
    resample,
    rmse,
    write_series_csv,
)
from .ecm import (
    BatteryConfig,
    BatteryState,
    EcmParams,
    OcvCurve,
    coulomb_socs,
    fit_ocv,
    invert_ocv,
    ocv_eval,
    simulate_series,
    soc_step,
    terminal_voltage,
    ud_step,
)
from .ekf import EkfConfig, EkfState, EstimateResult, ekf_predict, ekf_update, estimate_soc_series
from .ffrls import (
    FfrlsOptions,
    FfrlsState,
    Regressor,
    ThetaInversionError,
    ThetaVector,
    ffrls_init,
    ffrls_step,
    identify_series,
    params_from_theta,
    theta_forward,
)
from .fnn import FnnConfig, FnnModel, NormStats, OptimizerState, fnn_backward, fnn_forward, fnn_init, optimizer_step
from .synth import (
    CycleSpec,
    TruthConfig,
    TruthResult,
    bilinear_ecm_response,
    first_order_series,
    first_order_truth,
    gen_cycle,
    simulate_truth,
)
from .trainer import (
    ClampFlags,
    CorrectionTriple,
    HybridModel,
    ModelFormatError,
    ParamGuards,
    TrainingWindowing,
    TrainResult,
    backward_window,
    correct_params,
    default_fnn_configs,
    fresh_hybrid_model,
    load_model,
    loss_mse,
    predict_series,
    predict_window,
    save_model,
    train_offline,
)
