from .nn import (
    KVCache,
    LayerNorm,
    Linear,
    Module,
    SelfAttention,
    TransformerLayer,
    attention_stack,
    causal_allowed,
    param,
)
from .tensor import (
    DomainError,
    GraphError,
    NonFiniteError,
    NumericsError,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    flip,
    gelu,
    getitem,
    grad_enabled,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    softplus,
    square,
    sub,
    tanh,
    transpose,
)

attention_block = attention_stack

ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softplus": softplus,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named elementwise ops."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(ELEMENTWISE)}") from None
    return fn(*operands)
