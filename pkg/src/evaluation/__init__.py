from src.evaluation.metrics import (
    MetricsReport,
    ScoreMatrix,
    aggregate_reports,
    average_precision,
    class_prf,
    evaluate,
    mean_average_precision,
    overall_prf,
    per_class_ap,
    topk_prf,
)
