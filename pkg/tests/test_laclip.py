import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lldif.config import CAPTION_TEMPLATE, CLASS_NAMES
from lldif.laclip import LAClip, TokenizerError, alignment_loss, tokenize
from tests.conftest import central_diff_rel_err, tiny_config


def unit(x):
    return torch.nn.functional.normalize(x, dim=-1)


def dense_info_nce(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    s = a @ b.T / tau
    n = len(a)
    row = -np.mean([s[i, i] - np.log(np.exp(s[i]).sum()) for i in range(n)])
    col = -np.mean([s[i, i] - np.log(np.exp(s[:, i]).sum()) for i in range(n)])
    return 0.5 * (row + col)


@pytest.fixture
def clip():
    torch.manual_seed(0)
    return LAClip(tiny_config()).eval()


def test_image_embeddings_unit_norm_and_deterministic(clip):
    x = torch.rand(3, 3, 8, 8)
    a, b = clip.encode_image(x), clip.encode_image(x)
    for e in (a.feat, a.label_pred):
        assert e.shape == (3, 8)
        torch.testing.assert_close(e.norm(dim=-1), torch.ones(3), atol=1e-5, rtol=0)
    assert torch.equal(a.feat, b.feat) and torch.equal(a.label_pred, b.label_pred)


def test_distinct_images_give_distinct_embeddings(clip):
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 8, 8, generator=g)
    e = clip.encode_image(x)
    assert not torch.equal(e.feat[0], e.feat[1])
    assert not torch.equal(e.label_pred[0], e.label_pred[1])


def test_resolution_mismatch(clip):
    with pytest.raises(ValueError):
        clip.encode_image(torch.rand(1, 3, 16, 16))


def test_text_encoding():
    torch.manual_seed(0)
    clip = LAClip(tiny_config(n_classes=7)).eval()
    a = clip.encode_text(["happy"], "label")
    assert torch.equal(a, clip.encode_text(["happy"], "label"))
    labs = clip.encode_text(list(CLASS_NAMES), "label")
    assert labs.shape == (7, 8)
    torch.testing.assert_close(labs.norm(dim=-1), torch.ones(7), atol=1e-5, rtol=0)
    caps = clip.encode_captions([CAPTION_TEMPLATE.format(label=c) for c in CLASS_NAMES])
    torch.testing.assert_close(caps.norm(dim=-1), torch.ones(7), atol=1e-5, rtol=0)


def test_caption_tokens_differ_by_class():
    toks = [tokenize(CAPTION_TEMPLATE.format(label=c)) for c in CLASS_NAMES]
    assert len({tuple(t) for t in toks}) == len(CLASS_NAMES)


def test_tokenizer_errors():
    with pytest.raises(TokenizerError):
        tokenize("")
    with pytest.raises(TokenizerError):
        tokenize("a photo of a cat")
    with pytest.raises(TokenizerError):
        tokenize(" ".join(["a"] * 17))


def test_identical_embeddings_give_two_ln_n():
    n = 5
    v = unit(torch.ones(n, 8))
    loss = alignment_loss(v, v, v, v, 0.07)
    assert loss.item() == pytest.approx(2 * math.log(n), abs=1e-6)


def test_orthogonal_pairs_low_temperature():
    a = torch.eye(2, 4)
    assert alignment_loss(a, a, a, a, 1e-3).item() < 1e-12


def test_matches_dense_oracle():
    g = torch.Generator().manual_seed(2)
    f, c, lp, lt = (unit(torch.randn(4, 8, generator=g, dtype=torch.float64)) for _ in range(4))
    tau = 0.3
    ref = dense_info_nce(f.numpy(), c.numpy(), tau) + dense_info_nce(lp.numpy(), lt.numpy(), tau)
    assert alignment_loss(f, c, lp, lt, tau).item() == pytest.approx(ref, abs=1e-6)


def test_batch_of_one_rejected():
    v = unit(torch.ones(1, 4))
    with pytest.raises(ValueError):
        alignment_loss(v, v, v, v, 0.07)


def test_gradient_check_float64():
    g = torch.Generator().manual_seed(3)
    xs = [unit(torch.randn(4, 8, generator=g, dtype=torch.float64)).requires_grad_() for _ in range(4)]
    err = central_diff_rel_err(lambda t: alignment_loss(*t, 0.5), xs)
    assert err < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_permutation_invariant_and_nonnegative(n, seed, tau):
    g = torch.Generator().manual_seed(seed)
    xs = [unit(torch.randn(n, 6, generator=g, dtype=torch.float64)) for _ in range(4)]
    perm = torch.randperm(n, generator=g)
    a = alignment_loss(*xs, tau)
    b = alignment_loss(*(x[perm] for x in xs), tau)
    assert abs(a.item() - b.item()) < 1e-9
    assert a.item() >= 0
