from src.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.training.config import TrainConfig, load_config, parse_override_args
from src.training.optim import AdamWState, EmaState, adamw_step, cosine_lr, ema_update
from src.training.trainer import Trainer, TrainResult, train
