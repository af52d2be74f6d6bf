from src.autodiff.tensor import (
    Graph,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    concat_cols,
    cosine_rows,
    linear,
    no_grad,
    relu,
    row_mean,
    sigmoid,
    softmax_rows,
)
from src.autodiff.gradcheck import GradCheckReport, finite_diff_check
