"""Small numpy differentiable kernel: dense/activation layers, LSTM and ConvLSTM cells."""
from .functional import ConvLSTMState, conv1d_same, convlstm_step, lstm_step, sigmoid
from .layers import (ChannelAffine, ConvLSTM, Dense, FlattenLots, LayerStack, LogSoftmax, LSTM, ReLU, Sigmoid,
                     SplitLots, Squeeze, WindowFlatten)
from .optim import Adam, adam_init, adam_update

__all__ = [
    "Adam", "ChannelAffine", "ConvLSTM", "ConvLSTMState", "Dense", "FlattenLots", "LSTM", "LayerStack", "LogSoftmax",
    "ReLU", "Sigmoid", "SplitLots", "Squeeze", "WindowFlatten", "adam_init", "adam_update",
    "conv1d_same", "convlstm_step", "lstm_step", "sigmoid",
]
