"""Debiased rating prediction on missing-not-at-random feedback.

The package trains a causal three-headed prediction network with a
propensity-weighted loss and a contrastive objective over smoothed
preference-distribution embeddings, alongside classical reweighting
baselines (naive, IPS, SNIPS, DR), on either real explicit-feedback
datasets or a built-in MNAR exposure simulator.
"""

from .autodiff import (
    AdamState,
    ParamBlock,
    ParamSet,
    Tensor,
    adam_init,
    adam_step,
    finite_difference_check,
    value_and_grad,
)
from .backbone import EmbeddingTables, EncoderConfig, encode, mf_predict, pair_embedding
from .baselines import (
    PropensityModel,
    dr_loss,
    fit_propensity,
    ips_loss,
    naive_loss,
    snips_loss,
)
from .caunet import (
    CauNetModel,
    PredictionBundle,
    causal_loss,
    forward,
    init_caunet,
    momentum_update,
    predict_matrix,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .contrast import (
    PreferenceEmbedding,
    RatingVectorPair,
    assemble_rating_vectors,
    contrastive_loss,
    extract_preference,
)
from .data import (
    DataSplit,
    InteractionDataset,
    RatingScale,
    load_coat_matrix,
    load_triples,
    save_triples,
    split,
)
from .metrics import MetricReport, evaluate_predictions, ndcg_at_k, pointwise_metrics
from .simulate import (
    ExposurePolicy,
    SyntheticGroundTruth,
    calibrate_policy,
    generate_ground_truth,
    sample_observations,
)
from .sweep import sparsity_sweep, sweep_summary, write_sweep_csv
from .train import (
    TrainConfig,
    TrainReport,
    full_objective_loss,
    grid_search,
    train_baseline,
    train_counterclr,
    train_method,
)

__version__ = "0.1.0"
