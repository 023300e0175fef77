"""A tour of the recurrent pieces: a plain LSTM, an ART-LSTM, and the pinned reductions.

Run: python demos/01_cells_and_reductions.py
"""
import numpy as np

from art_transfer import art
from art_transfer import numcore as nc
from art_transfer.cells import encode_source, init_lstm, reverse_sequence

rng = np.random.default_rng(0)
d, n = 4, 6
store = nc.ParamStore()
src_f = init_lstm(store, "source.fwd", d, d, rng)
src_b = init_lstm(store, "source.bwd", d, d, rng)
fwd = art.init_art_lstm(store, "target.fwd", d, d, d, rng)
bwd = art.init_art_lstm(store, "target.bwd", d, d, d, rng)
print("parameter tensors:", len(store.names()))

X = nc.constant(rng.normal(size=(n, d)))
ef = encode_source(X, src_f)
eb = encode_source(reverse_sequence(X), src_b)
print("source states per direction:", ef.H.value.shape[-2], "of width", ef.H.value.shape[-1])


def encode(kind, **pins):
    return art.build_ablation(kind, fwd, bwd, **pins).encode(X, ef, eb)


full = encode("full_art")
print("full ART output shape:", full.value.shape)

# pinning the update gate to zero turns every fusion into the identity
same = encode("full_art", pin_z=0.0).value.tobytes() == encode("lstm_only").value.tobytes()
print("z = 0 gives the plain LSTM bit for bit:", same)

# pinning the concentrate gate to one ignores the attention context
same = encode("full_art", pin_u=1.0).value.tobytes() == encode("cct").value.tobytes()
print("u = 1 gives corresponding-cell transfer bit for bit:", same)

enc = art.build_ablation("full_art", fwd, bwd)
enc.encode(X, ef, eb)
forward = enc.traces[0]
print("forward h-stream attention rows (target position x source position):")
print(np.round(forward.alpha_h, 3))
print("row sums:", forward.alpha_h.sum(axis=1))
