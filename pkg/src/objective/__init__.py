from src.objective.losses import LossConfig, asl_loss, kcr_loss, total_loss
