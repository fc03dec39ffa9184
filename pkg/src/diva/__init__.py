"""DIVA: a variational autoencoder with three independent latent subspaces
(domain, residual, class) and learned conditional priors, for domain
generalization, plus the rotated-MNIST benchmark pipeline around it.
"""

from .config import ConfigError, ExperimentConfig
from .data import (
    DOMAIN_ANGLES,
    IdxError,
    Pool,
    Scenario,
    ScenarioError,
    build_rotated_mnist,
    build_scenario,
    load_mnist_train,
    load_scenario,
    parse_idx,
    rotate_images,
    save_scenario,
    write_idx_images,
    write_idx_labels,
)
from .distributions import (
    CategoricalParams,
    GaussianParams,
    categorical_log_prob,
    gaussian_kl,
    gaussian_log_density,
    recon_log_lik,
    reparam_sample,
    standard_normal,
    uniform_categorical,
)
from .evaluation import (
    BenchmarkReport,
    accuracy,
    embeddings_csv,
    export_embeddings,
    partial_reconstruct,
    probe,
    run_benchmark,
    sample_prior,
    swap_generate,
    write_pgm,
    write_pgm_grid,
)
from .model import (
    Checkpoint,
    CheckpointError,
    DivaModel,
    LatentTriple,
    SingleLatentVae,
    TruncatedPayloadError,
    UnknownFormatError,
    UnknownVersionError,
    aux_classify,
    build_model,
    conditional_prior,
    decode,
    encode,
    init_model,
    load_checkpoint,
    predict_class,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    ObjectiveWeights,
    alpha_y_rule,
    beta_schedule,
    diva_objective,
    semi_supervised_objective,
    supervised_elbo,
    unsupervised_bound,
    vae_ablation_objective,
)
from .trainer import (
    MetricsLog,
    TrainingDivergedError,
    gradient_check,
    train,
)

__version__ = "0.1.0"
