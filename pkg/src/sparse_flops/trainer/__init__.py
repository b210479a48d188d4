from .data import SyntheticDataset, generate_synthetic
from .losses import (
    RegularizerKind,
    batch_triplet_loss,
    flops_reg_grad,
    l1_reg_grad,
    mine_triplets,
    regularizer,
    triplet_loss,
)
from .model import (
    Activation,
    EncoderModel,
    Layer,
    l2_normalize,
    load_model,
    model_from_bytes,
    model_to_bytes,
    relu,
    save_model,
    sthresh,
)
from .training import LOG_COLUMNS, CollapseWarning, RunConfig, TrainingDiverged, TrainLog, anneal_lambda, evaluate, train
