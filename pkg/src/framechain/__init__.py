"""Two-step sequence labeling: residual ConvNet features + linear-chain CRF."""

from .crf import (
    CrfModel,
    LabelSequence,
    LabelSet,
    Marginals,
    ObservationSequence,
    RegularizedDataset,
    forward_backward,
    log_partition,
    objective,
    objective_gradient,
    sequence_score,
    viterbi_decode,
)
from .data import Corpus, SynthConfig, generate_synthetic_corpus, load_corpus
from .extractor import ExtractorConfig, ExtractorModel, SgdConfig
from .metrics import AblationReport, Metrics, evaluate, load_model, save_model
from .optim import OptimConfig, OptimReport, lbfgs_minimize, train_crf
from .pipeline import (
    TrainedPipeline,
    TwoStepConfig,
    predict_frames_softmax,
    predict_sequence,
    train_two_step,
)

__version__ = "0.1.0"
