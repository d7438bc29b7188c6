"""Multi-head positional-encoder tuning of a frozen toy grounded detector."""

from .autodiff import ParamStore, Tensor, backward, grad_check
from .detector import CATEGORIES, DetectorConfig, DetectorOutput, ToyGroundedDetector
from .errors import ContractError, DimensionError, FormatError, MPITuneError, NumericalError, VocabularyError
from .losses import LossWeights, Target, giou, hungarian, total_loss
from .metrics import EvalReport, evaluate
from .mhp import MHPEncoder, build_sinusoidal_table, count_params, insert, mix
from .peft import PeftConfig, TuningMethod, count_learnable, setup_method
from .scenes import SceneConfig, generate_pack, load_pack, save_pack, size_stratum
from .train import AdamW, TrainConfig, cosine_lr, train

__version__ = "0.1.0"
