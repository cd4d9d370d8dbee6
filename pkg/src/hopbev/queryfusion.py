"""Historical temporal query fusion.

Output queries from already-processed frames are adapted by a small MLP and
added to the pre-defined object queries before decoding the next frame.
Three connection forms select which history feeds the adaptor: recurrent
(only the immediately preceding frame's outputs), fully_connected (all
history, current frame only), and dense (all history at every frame).
History embeddings are detached before adaptation, so no backward pass spans
frames.
"""

from __future__ import annotations

from enum import Enum

import torch
from torch import nn

from .errors import ShapeError
from .heads import QuerySet
from .torchutil import init_linear


class ConnectionForm(str, Enum):
    RECURRENT = "recurrent"
    FULLY_CONNECTED = "fully_connected"
    DENSE = "dense"


class QueryAdaptor(nn.Module):
    """Two linear layers with expansion ratio 4, applied per query.

    Multi-frame history is averaged per query index before the MLP. Empty
    history adapts to the zero query set (sequence starts).
    """

    def __init__(self, channels, dtype=torch.float64, generator=None):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, 4 * channels, dtype=dtype)
        self.fc2 = nn.Linear(4 * channels, channels, dtype=dtype)
        init_linear(self.fc1, generator)
        init_linear(self.fc2, generator)

    def zero_final_layer(self):
        """Zero the output layer: fusion becomes an exact no-op."""
        with torch.no_grad():
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()
        return self

    def forward(self, history) -> QuerySet:
        if isinstance(history, QuerySet):
            history = [history]
        history = list(history)
        for h in history:
            if h.role != "output":
                raise ValueError(f"adaptor input must be output-role query sets, got {h.role!r}")
        if not history:
            zero = torch.zeros(0, self.channels, dtype=self.fc1.weight.dtype)
            return QuerySet(embeddings=zero, role="historical")
        stacked = torch.stack([h.embeddings.detach() for h in history])
        mean = stacked.mean(dim=0)
        return QuerySet(embeddings=self.fc2(torch.relu(self.fc1(mean))), role="historical")


def adapt_history(adaptor: QueryAdaptor, history, n_queries=None) -> QuerySet:
    """Adapt history into O_his; empty history yields an all-zero set of
    ``n_queries`` queries."""
    out = adaptor(history)
    if out.embeddings.shape[0] == 0:
        if n_queries is None:
            raise ValueError("empty history needs n_queries to size the zero set")
        zero = torch.zeros(n_queries, adaptor.channels, dtype=adaptor.fc1.weight.dtype)
        return QuerySet(embeddings=zero, role="historical")
    return out


def collect_history(form: ConnectionForm, outputs, k: int, adaptor: QueryAdaptor, n_queries: int) -> QuerySet:
    """Select and adapt history outputs for the frame at prediction index k.

    ``outputs`` are the output-role query sets of frames t-N .. t-k-1 in
    time order. Recurrent uses only the last one; fully_connected uses all of
    them but only for the current frame (k = 0), otherwise none; dense uses
    all of them at every frame.
    """
    form = ConnectionForm(form)
    if form is ConnectionForm.RECURRENT:
        chosen = outputs[-1:] if outputs else []
    elif form is ConnectionForm.FULLY_CONNECTED:
        chosen = list(outputs) if k == 0 else []
    else:
        chosen = list(outputs)
    return adapt_history(adaptor, chosen, n_queries=n_queries)


def merge_queries(predefined: QuerySet, historical: QuerySet) -> QuerySet:
    """Element-wise sum of the pre-defined and adapted historical queries."""
    a, b = predefined.embeddings, historical.embeddings
    if a.shape != b.shape:
        raise ShapeError(f"query shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return QuerySet(embeddings=a + b, role="predefined")
