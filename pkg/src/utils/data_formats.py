"""
Data format utilities for PVLR runs.

This module provides utilities for:
- Result schema validation
- File naming conventions
- CSV loading and saving
- Run configuration files
"""

import pandas as pd
import numpy as np
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union, Any
import yaml
import logging

logger = logging.getLogger(__name__)

METRIC_NAMES = ['map', 'cp', 'cr', 'cf1', 'op', 'or', 'of1']
METRIC_COLUMNS = METRIC_NAMES + [f"{name}_top3" for name in METRIC_NAMES]

# Result schemas
METRICS_SCHEMA = {
    **{col: 'float64' for col in METRIC_COLUMNS},
    'skipped_classes': 'int64',
}

EPOCH_LOG_SCHEMA = {
    'epoch': 'int64',
    'step': 'int64',
    'loss': 'float64',
    'cls_loss': 'float64',
    'kcr_loss': 'float64',
    'lr': 'float64',
    'alpha': 'float64',
    **{col: 'float64' for col in METRIC_COLUMNS},
}

ABLATION_SCHEMA = {
    'study': 'object',
    'mode': 'object',
    'seed': 'int64',
    'status': 'object',
    'sec_per_batch': 'float64',
    **{col: 'float64' for col in METRIC_COLUMNS},
}

SWEEP_SCHEMA = {
    'lambda_kcr': 'float64',
    'seed': 'int64',
    'status': 'object',
    **{col: 'float64' for col in METRIC_COLUMNS},
}

PER_CLASS_AP_SCHEMA = {
    'label': 'object',
    'positives': 'int64',
    'ap': 'float64',
}


class DataFormatValidator:
    """Validates result frames against their schemas."""

    @staticmethod
    def _check_columns(df: pd.DataFrame, required_cols: List[str], what: str) -> bool:
        missing_cols = [col for col in required_cols if col not in df.columns]
        if missing_cols:
            logger.error(f"Missing required {what} columns: {missing_cols}")
            return False
        return True

    @staticmethod
    def _check_unit_interval(df: pd.DataFrame, cols: List[str], what: str) -> bool:
        values = df[cols].to_numpy(dtype=np.float64)
        finite = values[~np.isnan(values)]
        if ((finite < 0) | (finite > 1)).any():
            logger.error(f"Found {what} values outside [0, 1]")
            return False
        return True

    @staticmethod
    def validate_metrics(df: pd.DataFrame) -> bool:
        """Validate a metrics report frame (one row per report)."""
        try:
            if not DataFormatValidator._check_columns(df, METRIC_COLUMNS, "metrics"):
                return False
            return DataFormatValidator._check_unit_interval(df, METRIC_COLUMNS, "metric")
        except Exception as e:
            logger.error(f"Error validating metrics: {e}")
            return False

    @staticmethod
    def validate_epoch_log(df: pd.DataFrame) -> bool:
        """Validate a per-epoch training log."""
        try:
            if not DataFormatValidator._check_columns(df, ['epoch', 'loss'] + METRIC_COLUMNS, "epoch log"):
                return False
            if not np.isfinite(df['loss'].to_numpy(dtype=np.float64)).all():
                logger.error("Found non-finite losses in epoch log")
                return False
            if not df['epoch'].is_monotonic_increasing:
                logger.error("Epoch column is not increasing")
                return False
            return DataFormatValidator._check_unit_interval(df, METRIC_COLUMNS, "metric")
        except Exception as e:
            logger.error(f"Error validating epoch log: {e}")
            return False

    @staticmethod
    def validate_score_frame(df: pd.DataFrame, binary: bool = False) -> bool:
        """Validate a score (or target, with ``binary``) matrix: header of class names, one row per sample."""
        try:
            if df.shape[1] == 0:
                logger.error("Score frame has no class columns")
                return False
            if len(set(df.columns)) != df.shape[1]:
                logger.error("Duplicate class names in score frame header")
                return False
            values = df.to_numpy(dtype=np.float64)
            if not np.isfinite(values).all():
                logger.error("Found non-finite values in score frame")
                return False
            if binary and not np.isin(values, (0.0, 1.0)).all():
                logger.error("Target frame contains values other than 0/1")
                return False
            return True
        except (TypeError, ValueError) as e:
            logger.error(f"Score frame is not numeric: {e}")
            return False


class FileNamingConventions:
    """Handles file naming conventions for run outputs."""

    @staticmethod
    def get_epoch_log_filename(run: str) -> str:
        return f"epochs_{run}.csv"

    @staticmethod
    def get_metrics_filename(run: str) -> str:
        return f"metrics_{run}.csv"

    @staticmethod
    def get_per_class_ap_filename(run: str) -> str:
        return f"per_class_ap_{run}.csv"

    @staticmethod
    def get_ablation_filename(study: str) -> str:
        return f"ablation_{study}.csv"

    @staticmethod
    def get_ablation_summary_filename(study: str) -> str:
        return f"ablation_{study}_summary.csv"

    @staticmethod
    def get_sweep_filename() -> str:
        return "sweep_lambda.csv"

    @staticmethod
    def get_sweep_summary_filename() -> str:
        return "sweep_lambda_summary.csv"

    @staticmethod
    def get_checkpoint_filename(run: str) -> str:
        return f"checkpoint_{run}.pvlr"

    @staticmethod
    def get_map_filename(map_name: str, sample_id: Union[int, str]) -> str:
        return f"map_{map_name}_{sample_id}.csv"

    @staticmethod
    def get_split_filename(split: str) -> str:
        return f"split_{split}.bin"

    @staticmethod
    def get_targets_filename(split: str) -> str:
        return f"targets_{split}.csv"

    @staticmethod
    def get_gradcheck_filename(mode: str) -> str:
        return f"gradcheck_{mode}.csv"


class DataLoader:
    """Handles CSV loading and saving of run results."""

    def __init__(self, base_path: Union[str, Path] = "runs"):
        self.base_path = Path(base_path)
        self.validator = DataFormatValidator()
        self.naming = FileNamingConventions()

    def _save(self, df: pd.DataFrame, filename: str, what: str) -> Path:
        filepath = self.base_path / filename
        filepath.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(filepath, index=False)
        logger.info(f"Saved {what}: {filepath}")
        return filepath

    def _load(self, filename: str, what: str) -> Optional[pd.DataFrame]:
        filepath = self.base_path / filename
        if not filepath.exists():
            logger.warning(f"{what} file not found: {filepath}")
            return None
        try:
            return pd.read_csv(filepath)
        except Exception as e:
            logger.error(f"Error loading {what}: {e}")
            return None

    def save_epoch_log(self, df: pd.DataFrame, run: str) -> Path:
        if not self.validator.validate_epoch_log(df):
            logger.warning(f"Epoch log for run {run} failed validation; saving anyway")
        return self._save(df, self.naming.get_epoch_log_filename(run), "epoch log")

    def load_epoch_log(self, run: str) -> Optional[pd.DataFrame]:
        return self._load(self.naming.get_epoch_log_filename(run), "Epoch log")

    def save_metrics(self, df: pd.DataFrame, run: str) -> Path:
        if not self.validator.validate_metrics(df):
            logger.warning(f"Metrics for run {run} failed validation; saving anyway")
        return self._save(df, self.naming.get_metrics_filename(run), "metrics")

    def load_metrics(self, run: str) -> Optional[pd.DataFrame]:
        df = self._load(self.naming.get_metrics_filename(run), "Metrics")
        if df is not None and not self.validator.validate_metrics(df):
            logger.error(f"Metrics validation failed for run {run}")
            return None
        return df

    def save_per_class_ap(self, df: pd.DataFrame, run: str) -> Path:
        validate_dataframe_schema(df, PER_CLASS_AP_SCHEMA)
        return self._save(df, self.naming.get_per_class_ap_filename(run), "per-class AP")

    def save_ablation(self, runs: pd.DataFrame, summary: pd.DataFrame, study: str) -> List[Path]:
        validate_dataframe_schema(runs, ABLATION_SCHEMA)
        return [self._save(runs, self.naming.get_ablation_filename(study), f"ablation runs ({study})"),
                self._save(summary, self.naming.get_ablation_summary_filename(study), f"ablation summary ({study})")]

    def save_sweep(self, runs: pd.DataFrame, summary: pd.DataFrame) -> List[Path]:
        validate_dataframe_schema(runs, SWEEP_SCHEMA)
        return [self._save(runs, self.naming.get_sweep_filename(), "lambda sweep runs"),
                self._save(summary, self.naming.get_sweep_summary_filename(), "lambda sweep summary")]

    def save_gradcheck(self, df: pd.DataFrame, mode: str) -> Path:
        return self._save(df, self.naming.get_gradcheck_filename(mode), f"gradient check ({mode})")


class RunConfigManager:
    """Manages run configuration files."""

    def __init__(self, base_path: Union[str, Path] = "runs"):
        self.base_path = Path(base_path)

    def save_run_config(self, config: Dict[str, Any], run: str) -> Path:
        """Save a run configuration with creation metadata."""
        from src import __version__

        self.base_path.mkdir(parents=True, exist_ok=True)
        filepath = self.base_path / f"config_{run}.yaml"

        config_with_metadata = {
            'run': run,
            'version': __version__,
            'created_date': datetime.now(timezone.utc).isoformat(),
            **config
        }

        with open(filepath, 'w', encoding='utf-8') as f:
            yaml.safe_dump(config_with_metadata, f, default_flow_style=False, sort_keys=False)

        logger.info(f"Saved run config: {filepath}")
        return filepath


# Keys written by save_run_config that are not part of the configuration itself
CONFIG_METADATA_KEYS = ('run', 'version', 'created_date')


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML (or JSON) configuration file into a dict, dropping saved metadata."""
    from src.utils.errors import ConfigError

    filepath = Path(path)
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config file {filepath}: {e}") from None
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ConfigError(f"config file {filepath} must hold a mapping, got {type(config).__name__}")
    return {k: v for k, v in config.items() if k not in CONFIG_METADATA_KEYS}


def validate_dataframe_schema(df: pd.DataFrame, schema: Dict[str, str]) -> bool:
    """Validate DataFrame against a schema."""
    try:
        for col, expected_dtype in schema.items():
            if col not in df.columns:
                logger.warning(f"Column {col} not found in DataFrame")
                continue

            if str(df[col].dtype) != expected_dtype:
                logger.warning(f"Column {col} has dtype {df[col].dtype}, expected {expected_dtype}")

        return True

    except Exception as e:
        logger.error(f"Error validating schema: {e}")
        return False