from nvqad.engine.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from nvqad.engine.gradcheck import grad_check
from nvqad.engine.optim import SGD, Adam
from nvqad.engine.tensor import *  # noqa: F401,F403
from nvqad.engine.tensor import __all__ as _tensor_all

__all__ = list(_tensor_all) + [
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "file_sha256",
    "SGD",
    "Adam",
]
