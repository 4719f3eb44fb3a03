from .engine import Tensor
