from src.data.synthdata import (
    DatasetSpec,
    DatasetSplits,
    PrototypeBank,
    SceneModel,
    SyntheticBatch,
    dump_split,
    load_split,
    make_dataset,
    render_features,
    sample_labels,
    text_world,
)
