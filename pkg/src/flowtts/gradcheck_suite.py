"""Finite-difference gradient checks for the three training losses.

Runs on a deliberately tiny model (a few thousand parameters) so the
checks finish in seconds: the token cross-entropy alone, the velocity
regression alone (gradient flowing through the conditioning), and the
joint sum.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .ar_model import ArConfig, am_forward, am_loss
from .flowmatch import FlowConfig, fm_loss, make_chunk_mask
from .sequence import DialogueScript, SpeakerProfile, build_sequence, loss_mask
from .tensor import ParameterStore, grad_check

AM_CFG = ArConfig(d_model=8, n_layers=1, n_heads=2, text_vocab=4, speech_vocab=6,
                  n_speaker_tags=2, d_spk=2, max_len=32)
FM_CFG = FlowConfig(d_model=8, n_layers=1, n_heads=2, d_mel=4, d_cond=8,
                    d_time=8, upsample_ratio=2)


def _fixture():
    rng = np.random.default_rng(42)
    profiles = [SpeakerProfile.make(0, rng.normal(size=AM_CFG.d_spk))]
    script = DialogueScript.make([(0, (1, 2))], 1)
    tokens = [1, 3, 5]
    seq = build_sequence(profiles, script, tokens, use_spk_embeddings=True)
    t_frames = len(tokens) * FM_CFG.upsample_ratio
    x0 = rng.standard_normal((t_frames, FM_CFG.d_mel)).astype(np.float32)
    x1 = rng.standard_normal((t_frames, FM_CFG.d_mel)).astype(np.float32)
    return seq, tokens, x0, x1


def loss_am(params: ParameterStore):
    seq, tokens, _, _ = _fixture()
    logits, _ = am_forward(seq, params, AM_CFG)
    return am_loss(logits, tokens, loss_mask(seq))


def loss_fm(params: ParameterStore):
    seq, tokens, x0, x1 = _fixture()
    _, h_am = am_forward(seq, params, AM_CFG)
    mask = make_chunk_mask(x0.shape[0], 2)
    return fm_loss(x0, x1, 0.4, h_am, mask, params, FM_CFG)


def loss_joint(params: ParameterStore):
    return tt.add(loss_am(params), loss_fm(params))


def run_gradcheck_suite(tolerance: float = 1e-3, max_elems_per_param: int = 5):
    """Returns [(loss name, GradCheckReport)] for all three losses."""
    out = []
    for name, fn in (("token_ce", loss_am), ("velocity_mse", loss_fm),
                     ("joint", loss_joint)):
        params = ParameterStore(7)
        fn(params)  # materialize every parameter before checking
        # h = 1e-5: the float64 oracle keeps roundoff ~1e-11 while the small
        # layer-norm width makes 1e-3 steps visibly truncation-limited
        out.append((name, grad_check(fn, params, tolerance=tolerance, h=1e-5,
                                     max_elems_per_param=max_elems_per_param)))
    return out
