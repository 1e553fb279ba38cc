"""Label-noise laboratory: adversarial label flipping and a robust co-trained defense."""
from .datasets import Dataset, NoisyLabels, SyntheticSpec, gen_synthetic, load_labels, save_labels
from .dividemix import DivideConfig, joint_predict, run as run_robust_dividemix
from .errors import ConfigError, DataError, LabError, NumericError, ShapeError
from .estimators import LabelNoiseInjector, LossMixture, MlpClassifier, RobustDivideMixClassifier
from .gmm import MixtureFit, VbConfig, fit_em, fit_mixture, fit_vb, posterior_low_mean
from .noise import BadLabelConfig, craft_badlabel, make_noise, transition_matrix
from .training import StandardConfig, train_standard

__version__ = "0.1.0"
