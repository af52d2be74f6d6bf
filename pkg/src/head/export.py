"""
Attention-map export for heatmap inspection.

Each map is written as CSV: the first column names the row (a label or a
visual token slot), the remaining columns hold the map entries.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd

from src.head.pvlr_head import HeadOutput
from src.utils.data_formats import FileNamingConventions

logger = logging.getLogger(__name__)


def _axis_names(map_name: str, label_names: Sequence[str], n_tokens: int):
    tokens = [f"token{i}" for i in range(n_tokens)]
    labels = list(label_names)
    if map_name in ("v2s", "cls"):
        return labels, tokens
    if map_name == "s2v":
        return tokens, labels
    return labels, labels


def map_frame(map_name: str, values, label_names: Sequence[str]) -> pd.DataFrame:
    """One attention map as a labelled DataFrame (row names in the ``row`` column)."""
    n_tokens = values.shape[1] if map_name in ("v2s", "cls") else values.shape[0]
    rows, cols = _axis_names(map_name, label_names, n_tokens)
    frame = pd.DataFrame(values, index=rows, columns=cols)
    frame.index.name = "row"
    return frame.reset_index()


def export_maps(output: HeadOutput, label_names: Sequence[str], out_dir: Union[str, Path],
                sample_id: Union[int, str] = 0) -> List[Path]:
    """Write every map present on ``output``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, tensor in output.maps().items():
        path = out_dir / FileNamingConventions.get_map_filename(name, sample_id)
        map_frame(name, tensor.data, label_names).to_csv(path, index=False)
        written.append(path)
    logger.info(f"Saved {len(written)} attention maps for sample {sample_id} to {out_dir}")
    return written
