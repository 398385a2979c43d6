from src.nn.layers import Linear, Mlp, ParamBlock, softplus
from src.nn.lstm import LstmCache, LstmCell
from src.nn.optim import Adam
from src.nn.gradcheck import grad_check

__all__ = ["Adam", "Linear", "LstmCache", "LstmCell", "Mlp", "ParamBlock", "grad_check", "softplus"]
