"""Self-supervised pre-training, noisy-label fine-tuning and Confident Learning detection
on a small numpy autodiff engine."""

from . import data, detection, encoders, experiments, ssl, tensor, training
from .data import generate_synthetic, inject_noise, load_cifar_binary, load_dataset
from .detection import find_label_errors, score_detection
from .encoders import Adam, Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .experiments import ExperimentConfig, aggregate, run_duration_sweep, run_extended_training, run_main_sweep
from .ssl import SslConfig, barlow_twins_loss, nt_xent_loss, pretrain
from .training import FinetuneConfig, finetune, predict_probs

__version__ = "0.1.0"
